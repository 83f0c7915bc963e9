//! Optimisation: Adam, the step-decay schedule, early stopping on
//! validation sCRPS, checkpoints and the training driver.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_ranges, FeatureConfig, FeatureSource, SplitSpec, Splits};
use crate::error::{Error, Result};
use crate::factor::{draw_noise, sample, SampleBlock, EVAL_SAMPLES, TRAIN_SAMPLES};
use crate::hierarchy::{AggregationMatrix, HierarchySpec};
use crate::loss::{objective_loss, Objective};
use crate::network::{FeatureBundle, InputDims, Network, NetworkConfig};
use crate::scoring::{scrps, ScoreConfig};
use crate::tensor::Tape;

/// Number of ×0.1 learning-rate drops spread evenly over `max_steps`.
pub const LR_DECIMATIONS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Evaluations without improvement before stopping; negative disables.
    pub patience: i64,
    pub n_mc_samples: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub score: ScoreConfig,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Crps,
            learning_rate: 5e-3,
            max_steps: 2000,
            patience: 5,
            n_mc_samples: TRAIN_SAMPLES,
            eval_every: 100,
            seed: 0,
            score: ScoreConfig::default(),
            eval_samples: EVAL_SAMPLES,
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.n_mc_samples < 2 || self.eval_samples < 2 {
            return Err(Error::Config("sample counts must be at least 2".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        self.score.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Learning rate for the 1-based `step`: divided by ten at each quarter.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = (1..=LR_DECIMATIONS)
            .filter(|&d| step * LR_DECIMATIONS > d * self.max_steps)
            .count();
        self.learning_rate * 0.1f64.powi(passed as i32)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[Vec<f64>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn update(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("adam", format!("{} params, {} grads, {} buffers", params.len(), grads.len(), self.m.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape("adam", format!("parameter {} has {} values, gradient {}", i, p.len(), g.len())));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient {} at parameter {} entry {}", g[j], i, j)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Everything needed to forecast again: network, feature recipe, hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub network: Network,
    pub features: FeatureConfig,
    pub hierarchy: HierarchySpec,
    pub objective: Objective,
    pub best_step: usize,
    pub best_val_scrps: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        let p = &ck.network.params;
        if p.names.len() != p.shapes.len() || p.shapes.len() != p.values.len() {
            return Err(Error::Data("checkpoint parameter lists have different lengths".into()));
        }
        for (name, (shape, v)) in p.names.iter().zip(p.shapes.iter().zip(&p.values)) {
            if shape.iter().product::<usize>() != v.len() {
                return Err(Error::Data(format!("checkpoint tensor '{}' has shape {:?} but {} values", name, shape, v.len())));
            }
        }
        Ok(ck)
    }

    /// Fail unless `spec` is the hierarchy this checkpoint was trained on.
    pub fn check_hierarchy(&self, spec: &HierarchySpec) -> Result<()> {
        if &self.hierarchy != spec {
            return Err(Error::shape("checkpoint", "hierarchy differs from the one used for training"));
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_scrps: Option<f64>,
    pub lr: f64,
}

pub fn write_history(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "train_loss", "val_scrps", "lr"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            format!("{}", r.train_loss),
            r.val_scrps.map_or(String::new(), |v| format!("{}", v)),
            format!("{}", r.lr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub steps_run: usize,
    /// Validation sCRPS of the parameters after the last step, when evaluated.
    pub final_val_scrps: Option<f64>,
}

/// Coherent samples from `network` for one window, `[N, N_h, n_samples]`.
pub fn forecast_samples(network: &Network, bundle: &FeatureBundle, s: &AggregationMatrix, n_samples: usize, seed: u64) -> Result<SampleBlock> {
    let (_tape, fp) = network.predict(bundle, s)?;
    let noise = draw_noise(fp.n_bottom(), fp.n_factors(), fp.n_horizons(), n_samples, seed)?;
    Ok(sample(&fp, &noise, s)?.coherent_block())
}

/// sCRPS over all rows of the forecast made at `t0`.
pub fn window_scrps(network: &Network, source: &FeatureSource<'_>, s: &AggregationMatrix, t0: usize, n_samples: usize, seed: u64) -> Result<f64> {
    let h = network.config.horizon;
    let bundle = source.bundle(t0, h)?;
    let block = forecast_samples(network, &bundle, s, n_samples, seed)?;
    scrps(&source.targets(s, t0, h)?, &block, &s.overall_mask())
}

/// Noise seed for a training step: distinct per (run seed, step).
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64 + 1)
}

/// Train a fresh network on `source` with the usual chronological split.
pub fn train(source: &FeatureSource<'_>, net_config: NetworkConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    net_config.validate()?;
    let data = source.data;
    let s = AggregationMatrix::build(&data.spec)?;
    let horizon = net_config.horizon;
    let splits = split_ranges(data.len(), SplitSpec { horizon })?;
    let network = initial_network(source, &s, net_config, config.seed)?;
    train_network(source, &s, &splits, network, config)
}

/// A freshly initialised network sized for `source` and `s`.
pub fn initial_network(source: &FeatureSource<'_>, s: &AggregationMatrix, net_config: NetworkConfig, seed: u64) -> Result<Network> {
    let dims = InputDims {
        n_rows: s.n_rows(),
        n_bottom: s.n_bottom(),
        hist_channels: source.hist_channels(),
        future_channels: source.future_channels(),
        static_features: source.static_dim(),
    };
    Network::new(net_config, dims, seed)
}

/// Continue training `network` in place of a fresh one.
pub fn train_network(
    source: &FeatureSource<'_>,
    s: &AggregationMatrix,
    splits: &Splits,
    network: Network,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(source, s, splits, network, config, &mut |_, _| {})
}

/// As [`train_network`], calling `observer(step, &network)` after every update.
pub fn train_observed(
    source: &FeatureSource<'_>,
    s: &AggregationMatrix,
    splits: &Splits,
    mut network: Network,
    config: &TrainConfig,
    observer: &mut dyn FnMut(usize, &Network),
) -> Result<TrainOutcome> {
    config.validate()?;
    let horizon = network.config.horizon;
    let first = source.first_origin();
    if splits.train.end < first + horizon {
        return Err(Error::Data(format!(
            "no training window: {} training steps cannot hold {} history plus {} horizon steps",
            splits.train.end, first, horizon
        )));
    }
    let last = splits.train.end - horizon;
    let val_origin = splits.validation.start;
    if splits.validation.len() < horizon {
        return Err(Error::Data(format!("validation span {} is shorter than the horizon {}", splits.validation.len(), horizon)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(&network.params.values);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut stale = 0i64;
    let mut steps_run = 0;
    let mut final_val = None;

    for step in 1..=config.max_steps {
        let t0 = rng.random_range(first..=last);
        let bundle = source.bundle(t0, horizon)?;
        let targets = source.targets(s, t0, horizon)?;
        let tape = Tape::new();
        let bound = network.bind(&tape, true)?;
        let fp = network.forward(&tape, &bundle, s, &bound)?;
        let noise = draw_noise(s.n_bottom(), network.config.n_factors, horizon, config.n_mc_samples, step_seed(config.seed, step))?;
        let loss = objective_loss(config.objective, &targets, &fp, s, &noise, &config.score)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("training loss is {} at step {}", value, step)));
        }
        let grads = loss.backward()?;
        let g: Vec<Vec<f64>> = bound.tensors.iter().map(|t| grads.get_or_zeros(t)).collect();
        let lr = config.lr_at(step);
        adam.update(&mut network.params.values, &g, lr)
            .map_err(|e| Error::Numerical(format!("step {}: {}", step, e)))?;
        steps_run = step;
        observer(step, &network);

        let evaluate = step % config.eval_every == 0 || step == config.max_steps;
        let mut val = None;
        if evaluate {
            let v = window_scrps(&network, source, s, val_origin, config.eval_samples, config.eval_seed)?;
            val = Some(v);
            final_val = Some(v);
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, step, network.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        } else {
            final_val = None;
        }
        log::debug!("step {} loss {:.6} lr {:.2e} val {:?}", step, value, lr, val);
        history.push(HistoryRow {
            step,
            train_loss: value,
            val_scrps: val,
            lr,
        });
        if evaluate && config.patience >= 0 && stale > config.patience {
            break;
        }
    }

    let (best_val, best_step, best_net) = match best {
        Some((v, st, n)) => (Some(v), st, n),
        None => (None, steps_run, network),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            network: best_net,
            features: source.config.clone(),
            hierarchy: source.data.spec.clone(),
            objective: config.objective,
            best_step,
            best_val_scrps: best_val,
        },
        history,
        steps_run,
        final_val_scrps: final_val,
    })
}
