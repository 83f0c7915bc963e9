//! Command-line interface: hierarchy inspection, synthetic data, training,
//! evaluation, sampling and calibration export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::baselines::{naive_forecast, seasonal_naive_empirical};
use crate::config::RunConfig;
use crate::data::{load_csv, load_csv_with_spec, load_static, make_synthetic_with, FeatureSource, HierDataset, SyntheticParams};
use crate::error::{Error, Result};
use crate::factor::{SampleBlock, EVAL_SAMPLES};
use crate::hierarchy::{AggregationMatrix, HierarchySpec};
use crate::scoring::{evaluate, ks_uniform, pit_value, EvalInputs, Metric, ScoreConfig};
use crate::training::{forecast_samples, train, write_history, Checkpoint};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "clover", version, about = "Coherent probabilistic forecasts for hierarchical time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Naive,
    SeasonalNaive,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the aggregation matrix and the level masks of a hierarchy.
    InspectHierarchy {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Generate a synthetic hierarchical dataset (data.csv, hierarchy.toml, params.json).
    Synth {
        #[arg(long, default_value_t = 8)]
        n_bottom: usize,
        #[arg(long, default_value_t = 512)]
        length: usize,
        #[arg(long, default_value_t = 1)]
        n_factors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json, history.csv and config.txt into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "static")]
        static_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        max_steps: Option<String>,
        /// Any config key, as `key=value`; may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score the test window of a dataset, per level and overall.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "static")]
        static_file: Option<PathBuf>,
        /// Score a reference forecaster instead of the checkpoint.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Forecast horizon for baselines; taken from the checkpoint otherwise.
        #[arg(long)]
        horizon: Option<usize>,
        /// Season length of the seasonal-naive baseline.
        #[arg(long, default_value_t = 12)]
        period: usize,
        #[arg(long, default_value = "scrps,relse,ql")]
        metrics: String,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[arg(long, default_value_t = EVAL_SAMPLES)]
        n_samples: usize,
        /// Also write the report to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export PIT values of the test-window forecasts.
    Calibration {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the hierarchy stored in the checkpoint.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "static")]
        static_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Consecutive non-overlapping windows ending at the last observation.
        #[arg(long, default_value_t = 1)]
        windows: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[arg(long, default_value_t = EVAL_SAMPLES)]
        n_samples: usize,
    },
    /// Write coherent forecast samples in long format.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "static")]
        static_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Forecast origin index; defaults to the start of the test window.
        #[arg(long)]
        origin: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n_samples: usize,
    },
}

/// Run a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::InspectHierarchy { spec } => inspect(&spec, out),
        Command::Synth { n_bottom, length, n_factors, seed, out: dir } => {
            let params = SyntheticParams::new(n_bottom, length, n_factors, seed);
            with_cleanup(&dir, &["data.csv", "hierarchy.toml", "params.json"], || synth(&params, &dir))?;
            writeln!(out, "wrote {}", dir.display())?;
            Ok(())
        }
        Command::Train {
            data,
            spec,
            config,
            static_file,
            out: dir,
            seed,
            objective,
            max_steps,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::from_file(p)?,
                None => RunConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{}'", kv)))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(o) = objective {
                cfg.set("objective", &o)?;
            }
            if let Some(m) = max_steps {
                cfg.set("sgd_max_steps", &m)?;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let ds = load_csv(&data, &spec, static_file.as_deref())?;
            let files = [CHECKPOINT_FILE, HISTORY_FILE, CONFIG_ECHO_FILE];
            let summary = with_cleanup(&dir, &files, || {
                let source = FeatureSource::new(&ds, cfg.features.clone())?;
                let outcome = train(&source, cfg.network.clone(), &cfg.train)?;
                outcome.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
                write_history(&outcome.history, dir.join(HISTORY_FILE))?;
                fs::write(dir.join(CONFIG_ECHO_FILE), cfg.to_key_value())?;
                Ok(format!(
                    "trained {} steps, best step {}, best validation sCRPS {}",
                    outcome.steps_run,
                    outcome.checkpoint.best_step,
                    outcome.checkpoint.best_val_scrps.map_or("n/a".into(), |v| format!("{:.6}", v))
                ))
            })?;
            writeln!(out, "{}", summary)?;
            Ok(())
        }
        Command::Evaluate {
            data,
            spec,
            checkpoint,
            static_file,
            baseline,
            horizon,
            period,
            metrics,
            eval_seed,
            n_samples,
            out: report_path,
        } => {
            let metrics = metrics.split(',').map(Metric::parse).collect::<Result<Vec<_>>>()?;
            if metrics.is_empty() {
                return Err(Error::InvalidArgument("no metrics requested".into()));
            }
            let ds = load_csv(&data, &spec, static_file.as_deref())?;
            let s = AggregationMatrix::build(&ds.spec)?;
            let (block, h) = match (baseline, &checkpoint) {
                (Some(b), _) => {
                    let h = horizon.ok_or_else(|| Error::InvalidArgument("--horizon is required with --baseline".into()))?;
                    let t0 = test_origin(&ds, h)?;
                    (baseline_samples(b, &ds, &s, t0, h, period, n_samples, eval_seed)?, h)
                }
                (None, Some(path)) => {
                    let ck = Checkpoint::load(path)?;
                    ck.check_hierarchy(&ds.spec)?;
                    let h = ck.network.config.horizon;
                    if horizon.is_some_and(|v| v != h) {
                        return Err(Error::InvalidArgument(format!("--horizon differs from the checkpoint horizon {}", h)));
                    }
                    let t0 = test_origin(&ds, h)?;
                    (model_samples(&ck, &ds, &s, t0, n_samples, eval_seed)?, h)
                }
                (None, None) => return Err(Error::InvalidArgument("either --checkpoint or --baseline is required".into())),
            };
            let t0 = test_origin(&ds, h)?;
            let targets = ds.aggregated(&s, t0..t0 + h)?;
            let last_obs = ds.aggregated(&s, t0 - 1..t0)?;
            let score_cfg = ScoreConfig::default();
            let inputs = EvalInputs {
                s: &s,
                targets: &targets,
                samples: &block,
                last_obs: &last_obs,
                config: &score_cfg,
                seed: eval_seed,
            };
            let mut text = String::from("level,metric,value\n");
            for m in metrics {
                for (level, metric, value) in evaluate(&inputs, m)?.rows() {
                    text.push_str(&format!("{},{},{}\n", level, metric, value));
                }
            }
            if let Some(p) = &report_path {
                with_cleanup_file(p, || fs::write(p, &text).map_err(Error::from))?;
            }
            out.write_all(text.as_bytes())?;
            Ok(())
        }
        Command::Calibration {
            data,
            checkpoint,
            spec,
            static_file,
            out: path,
            windows,
            eval_seed,
            n_samples,
        } => {
            if n_samples < 2 {
                return Err(Error::InvalidArgument(format!("calibration needs at least 2 samples, got {}", n_samples)));
            }
            if windows == 0 {
                return Err(Error::InvalidArgument("--windows must be at least 1".into()));
            }
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_for_checkpoint(&ck, &data, spec.as_deref(), static_file.as_deref())?;
            let s = AggregationMatrix::build(&ds.spec)?;
            let h = ck.network.config.horizon;
            let last = test_origin(&ds, h)?;
            if windows * h > last {
                return Err(Error::Data(format!("{} windows of {} steps do not fit before the end of the data", windows, h)));
            }
            let mut pits = Vec::new();
            let mut text = String::from("origin,series,level,horizon,pit\n");
            for w in (0..windows).rev() {
                let t0 = last - w * h;
                let block = model_samples(&ck, &ds, &s, t0, n_samples, eval_seed.wrapping_add(w as u64))?;
                let targets = ds.aggregated(&s, t0..t0 + h)?;
                for r in 0..s.n_rows() {
                    for k in 0..h {
                        let p = pit_value(targets[r * h + k], block.cell(r, k));
                        pits.push(p);
                        text.push_str(&format!("{},{},{},{},{}\n", ds.timestamps[t0], s.row_labels()[r], s.row_levels()[r], k + 1, p));
                    }
                }
            }
            with_cleanup_file(&path, || fs::write(&path, &text).map_err(Error::from))?;
            writeln!(out, "{} PIT values, KS distance from uniform {:.4}", pits.len(), ks_uniform(&pits))?;
            Ok(())
        }
        Command::Sample {
            data,
            checkpoint,
            spec,
            static_file,
            out: path,
            origin,
            seed,
            n_samples,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_for_checkpoint(&ck, &data, spec.as_deref(), static_file.as_deref())?;
            let s = AggregationMatrix::build(&ds.spec)?;
            let h = ck.network.config.horizon;
            let t0 = match origin {
                Some(t) => t,
                None => test_origin(&ds, h)?,
            };
            let block = model_samples(&ck, &ds, &s, t0, n_samples, seed)?;
            with_cleanup_file(&path, || write_samples(&path, &s, &block))?;
            writeln!(out, "wrote {} samples for {} rows x {} horizons", n_samples, s.n_rows(), h)?;
            Ok(())
        }
    }
}

fn inspect(spec: &Path, out: &mut dyn Write) -> Result<()> {
    let spec = HierarchySpec::from_file(spec)?;
    let s = AggregationMatrix::build(&spec)?;
    writeln!(out, "S: {} rows x {} bottom series ({} aggregates)", s.n_rows(), s.n_bottom(), s.n_aggregate())?;
    write!(out, "{}", s)?;
    writeln!(out, "levels:")?;
    for m in s.level_masks() {
        writeln!(out, "  {}: {} rows", m.name, m.count)?;
    }
    writeln!(out, "  overall: {} rows", s.n_rows())?;
    Ok(())
}

fn synth(params: &SyntheticParams, dir: &Path) -> Result<()> {
    let ds = make_synthetic_with(params)?;
    ds.write_csv(dir.join("data.csv"))?;
    fs::write(dir.join("hierarchy.toml"), ds.spec.to_toml_string())?;
    fs::write(dir.join("params.json"), serde_json::to_string_pretty(params)?)?;
    Ok(())
}

/// Forecast origin of the test window: the last `horizon` steps.
fn test_origin(ds: &HierDataset, horizon: usize) -> Result<usize> {
    if horizon == 0 || ds.len() <= horizon {
        return Err(Error::Data(format!("{} time steps leave no history before a test window of {}", ds.len(), horizon)));
    }
    Ok(ds.len() - horizon)
}

fn load_for_checkpoint(ck: &Checkpoint, data: &Path, spec: Option<&Path>, static_file: Option<&Path>) -> Result<HierDataset> {
    let mut ds = match spec {
        Some(p) => {
            let ds = load_csv(data, p, None)?;
            ck.check_hierarchy(&ds.spec)?;
            ds
        }
        None => load_csv_with_spec(data, ck.hierarchy.clone())?,
    };
    if let Some(p) = static_file {
        load_static(&mut ds, p)?;
    }
    Ok(ds)
}

fn model_samples(ck: &Checkpoint, ds: &HierDataset, s: &AggregationMatrix, t0: usize, n: usize, seed: u64) -> Result<SampleBlock> {
    let source = FeatureSource::new(ds, ck.features.clone())?;
    let bundle = source.bundle(t0, ck.network.config.horizon)?;
    forecast_samples(&ck.network, &bundle, s, n, seed)
}

#[allow(clippy::too_many_arguments)]
fn baseline_samples(
    b: Baseline,
    ds: &HierDataset,
    s: &AggregationMatrix,
    t0: usize,
    h: usize,
    period: usize,
    n: usize,
    seed: u64,
) -> Result<SampleBlock> {
    match b {
        Baseline::Naive => {
            // a point forecast, as a degenerate two-sample distribution
            let f = naive_forecast(ds, s, t0, h)?;
            let values = f.iter().flat_map(|&v| [v, v]).collect();
            SampleBlock::new(s.n_rows(), h, 2, values)
        }
        Baseline::SeasonalNaive => seasonal_naive_empirical(ds, s, t0, h, period, n, seed),
    }
}

fn write_samples(path: &Path, s: &AggregationMatrix, block: &SampleBlock) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series", "level", "horizon", "sample", "value"])?;
    for r in 0..block.n_rows {
        for h in 0..block.n_horizons {
            for (i, v) in block.cell(r, h).iter().enumerate() {
                w.write_record([
                    s.row_labels()[r].clone(),
                    s.row_levels()[r].clone(),
                    (h + 1).to_string(),
                    i.to_string(),
                    format!("{}", v),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Run `f` with `dir` as output directory; on failure, remove the listed
/// files that did not exist before, and the directory if it was created.
fn with_cleanup<T>(dir: &Path, files: &[&str], f: impl FnOnce() -> Result<T>) -> Result<T> {
    let created_dir = !dir.exists();
    fs::create_dir_all(dir)?;
    let fresh: Vec<PathBuf> = files.iter().map(|n| dir.join(n)).filter(|p| !p.exists()).collect();
    let result = f();
    if result.is_err() {
        for p in &fresh {
            let _ = fs::remove_file(p);
        }
        if created_dir {
            let _ = fs::remove_dir(dir);
        }
    }
    result
}

fn with_cleanup_file<T>(path: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let existed = path.exists();
    let result = f();
    if result.is_err() && !existed {
        let _ = fs::remove_file(path);
    }
    result
}

/// Parse arguments, run, report errors on stderr; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}
