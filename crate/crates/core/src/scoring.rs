//! Proper scoring rules and hierarchy-aware evaluation metrics.
//!
//! Sample-based scores use the fair pairwise normalisation
//! `1 / (2N(N−1))` for the spread term, for both CRPS and the energy
//! score, so that a one-dimensional energy score with `β = 1` is exactly the
//! CRPS estimator.

use std::f64::consts::PI;
use std::fmt;

use indexmap::IndexMap;
use serde::Serialize;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::factor::SampleBlock;
use crate::hierarchy::{AggregationMatrix, LevelMask, OVERALL_LEVEL};

/// How the energy score norm runs over a `[rows, horizons]` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum EnergyNorm {
    /// One Euclidean norm over the flattened `rows × horizons` vector.
    #[default]
    Joint,
    /// One norm over rows per horizon, summed over horizons.
    PerHorizon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    /// Energy score exponent, in `(0, 2)`.
    pub beta: f64,
    pub energy_norm: EnergyNorm,
    /// Quantile levels for CRPS-from-quantiles, strictly increasing in `(0, 1)`.
    pub quantile_grid: Vec<f64>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            energy_norm: EnergyNorm::Joint,
            quantile_grid: percent_grid(),
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        validate_grid(&self.quantile_grid)
    }
}

/// `0.01, 0.02, …, 0.99`
pub fn percent_grid() -> Vec<f64> {
    uniform_grid(99)
}

/// `n` equally spaced levels `i / (n + 1)`.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("energy score beta {} outside (0, 2)", beta)))
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|&q| !(q > 0.0 && q < 1.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("quantile grid must be strictly increasing inside (0, 1)".into()));
    }
    Ok(())
}

/// Fair CRPS estimator from a sample: mean absolute error minus half the
/// mean pairwise distance over distinct pairs. Unbiased, but can be
/// negative for an individual sample.
pub fn crps_empirical(y: f64, samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("CRPS needs at least 2 samples, got {}", samples.len())));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(crps_sorted(y, &sorted))
}

/// [`crps_empirical`] on an already sorted sample.
pub(crate) fn crps_sorted(y: f64, sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let abs_err: f64 = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − N + 1) x_(i)
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum();
    abs_err - spread / (n * (n - 1.0))
}

/// Closed-form CRPS of `N(mu, sigma²)` at `y`.
pub fn crps_normal(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", sigma)));
    }
    let std = Normal::standard();
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * std.cdf(z) - 1.0) + 2.0 * std.pdf(z) - 1.0 / PI.sqrt()))
}

/// Pinball loss `q·(y − pred)₊ + (1 − q)·(pred − y)₊`.
pub fn quantile_loss(y: f64, q: f64, pred: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {} outside (0, 1)", q)));
    }
    Ok(q * (y - pred).max(0.0) + (1.0 - q) * (pred - y).max(0.0))
}

/// CRPS approximated as twice the mean quantile loss over `grid`.
///
/// Non-monotone quantile values are scored as given, with a warning.
pub fn crps_from_quantiles(y: f64, values: &[f64], grid: &[f64]) -> Result<f64> {
    if values.len() != grid.len() {
        return Err(Error::shape(
            "crps_from_quantiles",
            format!("{} quantile values for a grid of {}", values.len(), grid.len()),
        ));
    }
    validate_grid(grid)?;
    if values.windows(2).any(|w| w[1] < w[0]) {
        log::warn!("quantile values are not monotone; scoring them as given");
    }
    let mut total = 0.0;
    for (&q, &v) in grid.iter().zip(values) {
        total += quantile_loss(y, q, v)?;
    }
    Ok(2.0 * total / grid.len() as f64)
}

fn norm_pow(sq: f64, beta: f64) -> f64 {
    let norm = sq.sqrt();
    if beta == 1.0 {
        norm
    } else {
        norm.powf(beta)
    }
}

/// Fair energy score estimator. `samples` is `[dim, N]` row-major (one
/// column per sample).
pub fn energy_score(y: &[f64], samples: &[f64], beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let dim = y.len();
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::shape(
            "energy_score",
            format!("{} sample values for dimension {}", samples.len(), dim),
        ));
    }
    let n = samples.len() / dim;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("energy score needs at least 2 samples, got {}", n)));
    }
    let at = |d: usize, i: usize| samples[d * n + i];
    let mut first = 0.0;
    for i in 0..n {
        let sq: f64 = (0..dim).map(|d| (at(d, i) - y[d]).powi(2)).sum();
        first += norm_pow(sq, beta);
    }
    let mut pair = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let sq: f64 = (0..dim).map(|d| (at(d, i) - at(d, j)).powi(2)).sum();
            pair += norm_pow(sq, beta);
        }
    }
    let nf = n as f64;
    // unordered pairs counted once, so 2·pair is the ordered-pair sum
    Ok(first / nf - pair / (nf * (nf - 1.0)))
}

/// Energy score of a `[rows, horizons, samples]` block against
/// `[rows, horizons]` targets under the chosen norm layout.
pub fn energy_score_block(targets: &[f64], block: &SampleBlock, beta: f64, norm: EnergyNorm) -> Result<f64> {
    let (nr, nh, ns) = (block.n_rows, block.n_horizons, block.n_samples);
    if targets.len() != nr * nh {
        return Err(Error::shape("energy_score_block", format!("{} targets for {}x{}", targets.len(), nr, nh)));
    }
    match norm {
        EnergyNorm::Joint => energy_score(targets, &block.values, beta),
        EnergyNorm::PerHorizon => {
            let mut total = 0.0;
            for h in 0..nh {
                let y: Vec<f64> = (0..nr).map(|r| targets[r * nh + h]).collect();
                let s: Vec<f64> = (0..nr).flat_map(|r| block.cell(r, h).iter().copied()).collect();
                debug_assert_eq!(s.len(), nr * ns);
                total += energy_score(&y, &s, beta)?;
            }
            Ok(total)
        }
    }
}

fn check_targets(targets: &[f64], block: &SampleBlock, mask: &LevelMask) -> Result<()> {
    if targets.len() != block.n_rows * block.n_horizons || mask.mask.len() != block.n_rows {
        return Err(Error::shape(
            "scrps",
            format!(
                "targets {} / mask {} vs samples {}x{}",
                targets.len(),
                mask.mask.len(),
                block.n_rows,
                block.n_horizons
            ),
        ));
    }
    Ok(())
}

/// Numerator and denominator of the scaled CRPS for one mask.
pub fn scrps_parts(targets: &[f64], block: &SampleBlock, mask: &LevelMask) -> Result<(f64, f64)> {
    check_targets(targets, block, mask)?;
    let nh = block.n_horizons;
    let mut buf = vec![0.0; block.n_samples];
    let (mut num, mut den) = (0.0, 0.0);
    for r in mask.rows() {
        for h in 0..nh {
            let y = targets[r * nh + h];
            buf.copy_from_slice(block.cell(r, h));
            if buf.len() < 2 {
                return Err(Error::InvalidArgument("CRPS needs at least 2 samples".into()));
            }
            buf.sort_by(f64::total_cmp);
            num += crps_sorted(y, &buf);
            den += y.abs();
        }
    }
    Ok((num, den))
}

/// Scaled CRPS: summed CRPS over masked rows and horizons divided by the
/// summed absolute targets of the same cells.
pub fn scrps(targets: &[f64], block: &SampleBlock, mask: &LevelMask) -> Result<f64> {
    let (num, den) = scrps_parts(targets, block, mask)?;
    if den == 0.0 {
        return Err(Error::Numerical(format!("sCRPS denominator is zero for level '{}'", mask.name)));
    }
    Ok(num / den)
}

/// Scaled CRPS computed from the `grid` quantiles of each cell.
pub fn scaled_quantile_crps(targets: &[f64], block: &SampleBlock, mask: &LevelMask, grid: &[f64]) -> Result<f64> {
    check_targets(targets, block, mask)?;
    let q = block.quantiles(grid)?;
    let nh = block.n_horizons;
    let nq = grid.len();
    let (mut num, mut den) = (0.0, 0.0);
    for r in mask.rows() {
        for h in 0..nh {
            let y = targets[r * nh + h];
            let cell = (r * nh + h) * nq;
            num += crps_from_quantiles(y, &q[cell..cell + nq], grid)?;
            den += y.abs();
        }
    }
    if den == 0.0 {
        return Err(Error::Numerical(format!("scaled quantile loss denominator is zero for level '{}'", mask.name)));
    }
    Ok(num / den)
}

/// Relative squared error of a mean forecast against the last-value naive
/// forecast. `targets` and `forecast` are `[rows, horizons]`; `last_obs`
/// holds the last observed value per row.
pub fn rel_se(targets: &[f64], forecast: &[f64], last_obs: &[f64], mask: &LevelMask) -> Result<f64> {
    let nr = mask.mask.len();
    if last_obs.len() != nr || targets.len() != forecast.len() || nr == 0 || !targets.len().is_multiple_of(nr) {
        return Err(Error::shape(
            "rel_se",
            format!("targets {}, forecast {}, last {} for {} rows", targets.len(), forecast.len(), last_obs.len(), nr),
        ));
    }
    let nh = targets.len() / nr;
    let (mut num, mut den) = (0.0, 0.0);
    for r in mask.rows() {
        for h in 0..nh {
            let y = targets[r * nh + h];
            num += (y - forecast[r * nh + h]).powi(2);
            den += (y - last_obs[r]).powi(2);
        }
    }
    if den == 0.0 {
        return Err(Error::Numerical(format!(
            "relSE denominator is zero for level '{}' (series constant at the last observation)",
            mask.name
        )));
    }
    Ok(num / den)
}

/// Forecast CDF at the realised value: the fraction of samples below `y`,
/// counting ties as half.
pub fn pit_value(y: f64, samples: &[f64]) -> f64 {
    let (mut below, mut ties) = (0usize, 0usize);
    for &s in samples {
        if s < y {
            below += 1;
        } else if s == y {
            ties += 1;
        }
    }
    (below as f64 + 0.5 * ties as f64) / samples.len() as f64
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `values` and
/// the uniform distribution on `[0, 1]`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Metric {
    Scrps,
    RelSe,
    QuantileLoss,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Scrps => "scrps",
            Metric::RelSe => "relse",
            Metric::QuantileLoss => "ql",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "scrps" => Ok(Metric::Scrps),
            "relse" => Ok(Metric::RelSe),
            "ql" => Ok(Metric::QuantileLoss),
            other => Err(Error::Config(format!("unknown metric '{}' (expected scrps, relse or ql)", other))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One metric evaluated at every hierarchy level plus overall.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub metric: Metric,
    pub per_level: IndexMap<String, f64>,
    pub overall: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl EvaluationReport {
    /// `level,metric,value` rows, levels in row order, then `overall`.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        self.per_level
            .iter()
            .map(|(l, v)| (l.clone(), self.metric.to_string(), *v))
            .chain(std::iter::once((OVERALL_LEVEL.to_string(), self.metric.to_string(), self.overall)))
            .collect()
    }
}

/// Everything needed to score one forecast window.
pub struct EvalInputs<'a> {
    pub s: &'a AggregationMatrix,
    /// `[rows, horizons]`
    pub targets: &'a [f64],
    pub samples: &'a SampleBlock,
    /// Last observed value per row, for relSE.
    pub last_obs: &'a [f64],
    pub config: &'a ScoreConfig,
    pub seed: u64,
}

/// Evaluate `metric` at every level mask of `S` and overall.
pub fn evaluate(inputs: &EvalInputs<'_>, metric: Metric) -> Result<EvaluationReport> {
    let score = |mask: &LevelMask| -> Result<f64> {
        match metric {
            Metric::Scrps => scrps(inputs.targets, inputs.samples, mask),
            Metric::QuantileLoss => scaled_quantile_crps(inputs.targets, inputs.samples, mask, &inputs.config.quantile_grid),
            Metric::RelSe => rel_se(inputs.targets, &inputs.samples.mean(), inputs.last_obs, mask),
        }
    };
    let mut per_level = IndexMap::new();
    for mask in inputs.s.level_masks() {
        per_level.insert(mask.name.clone(), score(&mask)?);
    }
    let overall = score(&inputs.s.overall_mask())?;
    Ok(EvaluationReport {
        metric,
        per_level,
        overall,
        n_samples: inputs.samples.n_samples,
        seed: inputs.seed,
    })
}
