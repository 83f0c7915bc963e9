//! Datasets: long-format CSV ingestion, chronological splits, calendar and
//! anchor features, and a synthetic hierarchical generator.
//!
//! The data file has columns `unique_id, ds, y` and any number of extra
//! numeric columns, which are treated as covariates known in advance. An
//! optional static file has a `unique_id` column plus numeric columns. Every
//! bottom series must cover exactly the same timestamps; gaps are an error,
//! never imputed.
//!
//! Timestamps sort numerically when every `ds` is an integer, by date when
//! every `ds` is an ISO date or date-time, and lexicographically otherwise.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Months, NaiveDate, NaiveDateTime};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{AggregationMatrix, HierarchySpec};
use crate::network::FeatureBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Daily,
    Weekly,
    Monthly,
    Quarterly,
}

impl Frequency {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "daily" | "d" => Ok(Frequency::Daily),
            "weekly" | "w" => Ok(Frequency::Weekly),
            "monthly" | "m" => Ok(Frequency::Monthly),
            "quarterly" | "q" => Ok(Frequency::Quarterly),
            other => Err(Error::Config(format!(
                "unknown frequency '{}' (expected daily, weekly, monthly or quarterly)",
                other
            ))),
        }
    }

    /// Number of calendar dummies, which is also the default season length.
    pub fn period(self) -> usize {
        match self {
            Frequency::Daily => 7,
            Frequency::Weekly => 52,
            Frequency::Monthly => 12,
            Frequency::Quarterly => 4,
        }
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Frequency::Daily => "daily",
            Frequency::Weekly => "weekly",
            Frequency::Monthly => "monthly",
            Frequency::Quarterly => "quarterly",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimeKind {
    Integer,
    Date,
    Text,
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().or_else(|| {
        ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
            .map(|dt| dt.date())
    })
}

fn time_kind<'a>(stamps: impl IntoIterator<Item = &'a String> + Clone) -> TimeKind {
    if stamps.clone().into_iter().all(|s| s.trim().parse::<i64>().is_ok()) {
        TimeKind::Integer
    } else if stamps.into_iter().all(|s| parse_date(s).is_some()) {
        TimeKind::Date
    } else {
        TimeKind::Text
    }
}

fn sort_timestamps(stamps: &mut [String]) {
    match time_kind(stamps.iter()) {
        TimeKind::Integer => stamps.sort_by_key(|s| s.trim().parse::<i64>().unwrap_or_default()),
        TimeKind::Date => stamps.sort_by_key(|s| parse_date(s)),
        TimeKind::Text => stamps.sort(),
    }
}

/// Bottom-level targets with covariates, aligned on one timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct HierDataset {
    pub spec: HierarchySpec,
    pub timestamps: Vec<String>,
    /// `[N_b, T]`
    pub values: Vec<f64>,
    /// Names of known covariate columns.
    pub exog_names: Vec<String>,
    /// `[N_b, F_x, T]`
    pub exog: Vec<f64>,
    pub static_names: Vec<String>,
    /// `[N_b, F_s]`; empty when no static file was given.
    pub static_values: Vec<f64>,
}

impl HierDataset {
    pub fn n_bottom(&self) -> usize {
        self.spec.bottom_ids.len()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn series(&self, b: usize) -> &[f64] {
        let t = self.len();
        &self.values[b * t..(b + 1) * t]
    }

    pub fn n_exog(&self) -> usize {
        self.exog_names.len()
    }

    fn exog_series(&self, b: usize, j: usize) -> &[f64] {
        let (t, fx) = (self.len(), self.n_exog());
        &self.exog[(b * fx + j) * t..(b * fx + j + 1) * t]
    }

    /// Static features, or a one-hot series indicator when none were loaded.
    pub fn static_features(&self) -> (usize, Vec<f64>) {
        let nb = self.n_bottom();
        if self.static_names.is_empty() {
            let v = (0..nb).flat_map(|b| (0..nb).map(move |j| if j == b { 1.0 } else { 0.0 })).collect();
            (nb, v)
        } else {
            (self.static_names.len(), self.static_values.clone())
        }
    }

    /// All hierarchy rows over `range`, `[N, len]`.
    pub fn aggregated(&self, s: &AggregationMatrix, range: Range<usize>) -> Result<Vec<f64>> {
        let w = range.len();
        let mut bottom = Vec::with_capacity(self.n_bottom() * w);
        for b in 0..self.n_bottom() {
            bottom.extend_from_slice(&self.series(b)[range.clone()]);
        }
        s.aggregate(&bottom, w)
    }

    /// Write the data in long format (`unique_id, ds, y, covariates…`).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["unique_id".to_string(), "ds".into(), "y".into()];
        header.extend(self.exog_names.iter().cloned());
        w.write_record(&header)?;
        for (b, id) in self.spec.bottom_ids.iter().enumerate() {
            for (t, ds) in self.timestamps.iter().enumerate() {
                let mut rec = vec![id.clone(), ds.clone(), format!("{}", self.series(b)[t])];
                rec.extend((0..self.n_exog()).map(|j| format!("{}", self.exog_series(b, j)[t])));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_number(field: &str, what: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Data(format!("line {}: {} '{}' is not a finite number", line, what, field)))
}

/// Load a long-format data file against a hierarchy spec file, with an
/// optional static feature file.
pub fn load_csv(data: impl AsRef<Path>, spec: impl AsRef<Path>, static_file: Option<&Path>) -> Result<HierDataset> {
    let spec = HierarchySpec::from_file(spec)?;
    let mut ds = load_csv_with_spec(data, spec)?;
    if let Some(path) = static_file {
        load_static(&mut ds, path)?;
    }
    Ok(ds)
}

/// Load a long-format data file for an already parsed hierarchy.
pub fn load_csv_with_spec(data: impl AsRef<Path>, spec: HierarchySpec) -> Result<HierDataset> {
    spec.validate()?;
    let mut rdr = csv::Reader::from_path(data.as_ref())?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("data file has no '{}' column", name)))
    };
    let (ci, cd, cy) = (col("unique_id")?, col("ds")?, col("y")?);
    let exog_cols: Vec<usize> = (0..headers.len()).filter(|c| ![ci, cd, cy].contains(c)).collect();
    let exog_names: Vec<String> = exog_cols.iter().map(|&c| headers[c].trim().to_string()).collect();

    let index: HashMap<&str, usize> = spec.bottom_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let nb = spec.bottom_ids.len();
    let mut rows: Vec<HashMap<String, (f64, Vec<f64>)>> = vec![HashMap::new(); nb];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(ci).unwrap_or("").trim();
        let b = *index
            .get(id)
            .ok_or_else(|| Error::Data(format!("line {}: series '{}' is not in the hierarchy", line, id)))?;
        let ds = rec.get(cd).unwrap_or("").trim().to_string();
        let y = parse_number(rec.get(cy).unwrap_or(""), "y", line)?;
        let ex = exog_cols
            .iter()
            .zip(&exog_names)
            .map(|(&c, name)| parse_number(rec.get(c).unwrap_or(""), name, line))
            .collect::<Result<Vec<_>>>()?;
        if rows[b].insert(ds.clone(), (y, ex)).is_some() {
            return Err(Error::Data(format!("duplicate row for series '{}' at ds '{}'", id, ds)));
        }
    }
    let mut stamps: Vec<String> = rows
        .iter()
        .flat_map(|m| m.keys().cloned())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    if stamps.is_empty() {
        return Err(Error::Data("data file has no rows".into()));
    }
    sort_timestamps(&mut stamps);
    let t = stamps.len();
    let fx = exog_names.len();
    let mut values = vec![0.0; nb * t];
    let mut exog = vec![0.0; nb * fx * t];
    for (b, m) in rows.iter().enumerate() {
        if m.len() != t {
            let missing = stamps.iter().find(|s| !m.contains_key(*s)).cloned().unwrap_or_default();
            return Err(Error::Data(format!(
                "ragged series '{}': {} of {} timestamps present (first missing: '{}')",
                spec.bottom_ids[b],
                m.len(),
                t,
                missing
            )));
        }
        for (i, st) in stamps.iter().enumerate() {
            let (y, ex) = &m[st];
            values[b * t + i] = *y;
            for j in 0..fx {
                exog[(b * fx + j) * t + i] = ex[j];
            }
        }
    }
    Ok(HierDataset {
        spec,
        timestamps: stamps,
        values,
        exog_names,
        exog,
        static_names: Vec::new(),
        static_values: Vec::new(),
    })
}

/// Attach static features from a `unique_id, feature…` file.
pub fn load_static(ds: &mut HierDataset, path: &Path) -> Result<()> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let ci = headers
        .iter()
        .position(|h| h.trim() == "unique_id")
        .ok_or_else(|| Error::Data("static file has no 'unique_id' column".into()))?;
    let cols: Vec<usize> = (0..headers.len()).filter(|&c| c != ci).collect();
    if cols.is_empty() {
        return Err(Error::Data("static file has no feature columns".into()));
    }
    let mut by_id: HashMap<String, Vec<f64>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(ci).unwrap_or("").trim().to_string();
        let v = cols
            .iter()
            .map(|&c| parse_number(rec.get(c).unwrap_or(""), headers[c].trim(), line))
            .collect::<Result<Vec<_>>>()?;
        if by_id.insert(id.clone(), v).is_some() {
            return Err(Error::Data(format!("duplicate static row for series '{}'", id)));
        }
    }
    let mut values = Vec::new();
    for id in &ds.spec.bottom_ids {
        let v = by_id
            .get(id)
            .ok_or_else(|| Error::Data(format!("static file has no row for series '{}'", id)))?;
        values.extend_from_slice(v);
    }
    ds.static_names = cols.iter().map(|&c| headers[c].trim().to_string()).collect();
    ds.static_values = values;
    Ok(())
}

/// Season index of every timestamp, in `0..frequency.period()`.
fn season_index(timestamps: &[String], frequency: Frequency) -> Vec<usize> {
    let p = frequency.period();
    match time_kind(timestamps.iter()) {
        TimeKind::Integer => timestamps
            .iter()
            .map(|s| s.trim().parse::<i64>().unwrap_or_default().rem_euclid(p as i64) as usize)
            .collect(),
        TimeKind::Date => timestamps
            .iter()
            .map(|s| {
                let d = parse_date(s).expect("checked by time_kind");
                match frequency {
                    Frequency::Daily => d.weekday().num_days_from_monday() as usize,
                    Frequency::Weekly => (d.iso_week().week0() as usize).min(p - 1),
                    Frequency::Monthly => d.month0() as usize,
                    Frequency::Quarterly => d.month0() as usize / 3,
                }
            })
            .collect(),
        TimeKind::Text => (0..timestamps.len()).map(|i| i % p).collect(),
    }
}

/// One-hot calendar dummies, `[period, T]`.
pub fn make_calendar_features(timestamps: &[String], frequency: Frequency) -> Vec<f64> {
    let (p, t) = (frequency.period(), timestamps.len());
    let mut out = vec![0.0; p * t];
    for (i, s) in season_index(timestamps, frequency).into_iter().enumerate() {
        out[s * t + i] = 1.0;
    }
    out
}

/// Seasonal-naive value for time `tau` using only data before `known_end`:
/// the most recent observation a whole number of seasons back. Before the
/// first full season the series' first value stands in.
pub fn anchor_value(series: &[f64], tau: usize, known_end: usize, period: usize) -> f64 {
    let seasons = if tau < known_end { 1 } else { (tau - known_end) / period + 1 };
    match tau.checked_sub(seasons * period) {
        Some(i) => series[i],
        None => series[0],
    }
}

/// Seasonal-naive anchor `y_{t−p}` for every `t` of a series.
pub fn seasonal_naive_anchor(series: &[f64], period: usize) -> Vec<f64> {
    (0..series.len()).map(|t| anchor_value(series, t, t, period)).collect()
}

/// Train / validation / test boundaries for a horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub horizon: usize,
}

/// Contiguous chronological windows over a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

/// Borrowed time window of a dataset.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub data: &'a HierDataset,
    pub range: Range<usize>,
}

impl DatasetView<'_> {
    pub fn series(&self, b: usize) -> &[f64] {
        &self.data.series(b)[self.range.clone()]
    }

    pub fn timestamps(&self) -> &[String] {
        &self.data.timestamps[self.range.clone()]
    }
}

/// Test is the last `N_h` steps, validation the `N_h` before it, train the rest.
pub fn split_ranges(t: usize, spec: SplitSpec) -> Result<Splits> {
    let h = spec.horizon;
    if h == 0 || t < 3 * h {
        return Err(Error::Data(format!("series of length {} is too short for horizon {} (need {})", t, h, 3 * h)));
    }
    Ok(Splits {
        train: 0..t - 2 * h,
        validation: t - 2 * h..t - h,
        test: t - h..t,
    })
}

pub fn split(ds: &HierDataset, spec: SplitSpec) -> Result<(DatasetView<'_>, DatasetView<'_>, DatasetView<'_>)> {
    let s = split_ranges(ds.len(), spec)?;
    let view = |range| DatasetView { data: ds, range };
    Ok((view(s.train), view(s.validation), view(s.test)))
}

/// How model inputs are derived from a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Calendar dummies are added when set.
    pub frequency: Option<Frequency>,
    pub context_length: usize,
    /// Season length for the anchor; defaults to the frequency period.
    pub season_length: Option<usize>,
    /// Adds the seasonal-naive anchor as a future channel.
    pub anchor: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frequency: Some(Frequency::Monthly),
            context_length: 48,
            season_length: None,
            anchor: true,
        }
    }
}

impl FeatureConfig {
    pub fn period(&self) -> Option<usize> {
        self.season_length.or(self.frequency.map(Frequency::period))
    }

    fn calendar_channels(&self) -> usize {
        self.frequency.map_or(0, Frequency::period)
    }
}

/// Precomputed per-dataset features used to cut windows quickly.
#[derive(Debug, Clone)]
pub struct FeatureSource<'a> {
    pub data: &'a HierDataset,
    pub config: FeatureConfig,
    calendar: Vec<f64>,
    static_features: (usize, Vec<f64>),
}

impl<'a> FeatureSource<'a> {
    pub fn new(data: &'a HierDataset, config: FeatureConfig) -> Result<Self> {
        if config.context_length == 0 {
            return Err(Error::Config("context_length must be at least 1".into()));
        }
        if config.anchor && config.period().is_none() {
            return Err(Error::Config("the seasonal anchor needs a frequency or season_length".into()));
        }
        if config.period() == Some(0) {
            return Err(Error::Config("season_length must be at least 1".into()));
        }
        let calendar = config
            .frequency
            .map_or_else(Vec::new, |f| make_calendar_features(&data.timestamps, f));
        let static_features = data.static_features();
        Ok(Self {
            data,
            config,
            calendar,
            static_features,
        })
    }

    pub fn hist_channels(&self) -> usize {
        1 + self.config.calendar_channels() + self.data.n_exog()
    }

    pub fn future_channels(&self) -> usize {
        self.config.calendar_channels() + self.data.n_exog() + usize::from(self.config.anchor)
    }

    pub fn static_dim(&self) -> usize {
        self.static_features.0
    }

    /// Earliest forecast creation index with a full history window.
    pub fn first_origin(&self) -> usize {
        self.config.context_length
    }

    /// Model inputs for forecasts of `[t0, t0 + horizon)` made at `t0`.
    pub fn bundle(&self, t0: usize, horizon: usize) -> Result<FeatureBundle> {
        let d = self.data;
        let (t_len, l) = (d.len(), self.config.context_length);
        if t0 < l || t0 + horizon > t_len {
            return Err(Error::Data(format!(
                "forecast window at {} with horizon {} and history {} does not fit in {} steps",
                t0, horizon, l, t_len
            )));
        }
        let (nb, nc, fx) = (d.n_bottom(), self.config.calendar_channels(), d.n_exog());
        let (fh, ff) = (self.hist_channels(), self.future_channels());
        let hist_r = t0 - l..t0;
        let fut_r = t0..t0 + horizon;
        let mut historical = Vec::with_capacity(nb * fh * l);
        let mut future = Vec::with_capacity(nb * ff * horizon);
        for b in 0..nb {
            historical.extend_from_slice(&d.series(b)[hist_r.clone()]);
            for c in 0..nc {
                historical.extend_from_slice(&self.calendar[c * t_len..(c + 1) * t_len][hist_r.clone()]);
            }
            for j in 0..fx {
                historical.extend_from_slice(&d.exog_series(b, j)[hist_r.clone()]);
            }
            for c in 0..nc {
                future.extend_from_slice(&self.calendar[c * t_len..(c + 1) * t_len][fut_r.clone()]);
            }
            for j in 0..fx {
                future.extend_from_slice(&d.exog_series(b, j)[fut_r.clone()]);
            }
            if self.config.anchor {
                let p = self.config.period().expect("checked in new");
                future.extend(fut_r.clone().map(|tau| anchor_value(d.series(b), tau, t0, p)));
            }
        }
        let mut units = vec![false; ff];
        if self.config.anchor {
            units[ff - 1] = true;
        }
        Ok(FeatureBundle {
            n_bottom: nb,
            hist_channels: fh,
            context: l,
            historical,
            future_channels: ff,
            horizon,
            future,
            static_features: self.static_features.0,
            static_values: self.static_features.1.clone(),
            target_channel: 0,
            future_in_target_units: units,
        })
    }

    /// Targets for every hierarchy row over `[t0, t0 + horizon)`, `[N, N_h]`.
    pub fn targets(&self, s: &AggregationMatrix, t0: usize, horizon: usize) -> Result<Vec<f64>> {
        self.data.aggregated(s, t0..t0 + horizon)
    }

    /// Last observation before `t0` for every hierarchy row.
    pub fn last_observation(&self, s: &AggregationMatrix, t0: usize) -> Result<Vec<f64>> {
        if t0 == 0 {
            return Err(Error::Data("no observation before the first time step".into()));
        }
        self.data.aggregated(s, t0 - 1..t0)
    }
}

/// Generation parameters of [`make_synthetic_with`], echoed to a sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub n_bottom: usize,
    pub length: usize,
    pub n_factors: usize,
    pub seed: u64,
    pub period: usize,
    pub start: String,
    /// Per-series level.
    pub level: Vec<f64>,
    /// Per-series seasonal amplitude.
    pub amplitude: Vec<f64>,
    /// Per-series seasonal phase shift, in steps.
    pub phase: Vec<f64>,
    /// Idiosyncratic AR(1) coefficient.
    pub ar_coef: f64,
    /// Idiosyncratic innovation scale.
    pub noise_scale: f64,
    /// `[N_b, N_k]`
    pub loadings: Vec<f64>,
    /// Shared factors are iid `N(0, factor_scale²)` per step.
    pub factor_scale: f64,
}

impl SyntheticParams {
    /// Default generator: a common seasonal cycle with small per-series
    /// phase shifts, levels near the seasonal swing so troughs are sometimes
    /// clipped at zero, moderate AR noise, positive loadings.
    pub fn new(n_bottom: usize, length: usize, n_factors: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E_ED0F_DA7A);
        let period = 12;
        Self {
            n_bottom,
            length,
            n_factors,
            seed,
            period,
            start: "1980-01-01".into(),
            level: (0..n_bottom).map(|_| rng.random_range(2.0..4.0)).collect(),
            amplitude: (0..n_bottom).map(|_| rng.random_range(1.5..3.0)).collect(),
            phase: (0..n_bottom).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ar_coef: 0.6,
            noise_scale: 0.5,
            loadings: (0..n_bottom * n_factors).map(|_| rng.random_range(0.5..1.0)).collect(),
            factor_scale: 1.0,
        }
    }

    /// Noise-free seasonal mean of series `b` at step `t`, before clipping.
    pub fn seasonal_mean(&self, b: usize, t: usize) -> f64 {
        let angle = 2.0 * std::f64::consts::PI * (t as f64 + self.phase[b]) / self.period as f64;
        self.level[b] + self.amplitude[b] * angle.sin()
    }
}

/// Two-level hierarchy over `n` bottom series: total, two halves, bottom.
pub fn halves_hierarchy(n: usize) -> HierarchySpec {
    let ids: Vec<String> = (0..n).map(|i| format!("s{}", i)).collect();
    let half = n.div_ceil(2);
    HierarchySpec::new(ids.clone(), true).with_level(
        "half",
        [("first", ids[..half].to_vec()), ("second", ids[half..].to_vec())]
            .into_iter()
            .filter(|(_, m)| !m.is_empty()),
    )
}

/// Synthetic dataset from the default generator.
pub fn make_synthetic(n_bottom: usize, length: usize, n_factors: usize, seed: u64) -> Result<(HierDataset, SyntheticParams)> {
    let params = SyntheticParams::new(n_bottom, length, n_factors, seed);
    Ok((make_synthetic_with(&params)?, params))
}

/// Seasonal pattern plus shared factors plus AR(1) noise, clipped at zero,
/// on monthly dates with the halves hierarchy attached.
pub fn make_synthetic_with(p: &SyntheticParams) -> Result<HierDataset> {
    let (nb, t, nk) = (p.n_bottom, p.length, p.n_factors);
    if nb < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 bottom series".into()));
    }
    if [p.level.len(), p.amplitude.len(), p.phase.len()].iter().any(|&l| l != nb) || p.loadings.len() != nb * nk {
        return Err(Error::InvalidArgument("synthetic parameter lengths do not match n_bottom / n_factors".into()));
    }
    let start = NaiveDate::parse_from_str(&p.start, "%Y-%m-%d")
        .map_err(|e| Error::InvalidArgument(format!("start date '{}': {}", p.start, e)))?;
    let timestamps = (0..t)
        .map(|i| {
            start
                .checked_add_months(Months::new(i as u32))
                .map(|d| d.format("%Y-%m-%d").to_string())
                .ok_or_else(|| Error::InvalidArgument("synthetic dates overflow".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let factors: Vec<f64> = (0..nk * t).map(|_| p.factor_scale * normal()).collect();
    let mut values = vec![0.0; nb * t];
    for b in 0..nb {
        let mut e = p.noise_scale * normal() / (1.0 - p.ar_coef * p.ar_coef).max(1e-6).sqrt();
        for i in 0..t {
            if i > 0 {
                e = p.ar_coef * e + p.noise_scale * normal();
            }
            let shared: f64 = (0..nk).map(|k| p.loadings[b * nk + k] * factors[k * t + i]).sum();
            values[b * t + i] = (p.seasonal_mean(b, i) + shared + e).max(0.0);
        }
    }
    Ok(HierDataset {
        spec: halves_hierarchy(nb),
        timestamps,
        values,
        exog_names: Vec::new(),
        exog: Vec::new(),
        static_names: Vec::new(),
        static_values: Vec::new(),
    })
}
