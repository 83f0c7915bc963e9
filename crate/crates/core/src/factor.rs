//! Gaussian factor output distribution.
//!
//! For each bottom series `b`, horizon `η` and sample `s`:
//!
//! ```text
//! raw[b,η,s]      = μ[b,η] + σ[b,η]·z[b,η,s] + Σ_k F[b,k,η]·ε[k,η,s]
//! coherent[:,η,s] = S · max(raw[:,η,s], 0)
//! ```
//!
//! `z` and `ε` are parameter-free standard normal draws, so the samples are
//! differentiable functions of `(μ, σ, F)` on the tape. The factor draws `ε`
//! carry no series index: every bottom series sees the same factors, which is
//! what induces the `Diag(σ²) + F·Fᵀ` covariance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::hierarchy::AggregationMatrix;
use crate::tensor::{Tape, Tensor};

/// Default Monte Carlo sample count while training.
pub const TRAIN_SAMPLES: usize = 100;
/// Default Monte Carlo sample count for evaluation.
pub const EVAL_SAMPLES: usize = 1000;

/// Location, scale and loadings for every (bottom series, horizon).
#[derive(Debug, Clone)]
pub struct FactorParams {
    /// `[N_b, N_h]`
    pub mu: Tensor,
    /// `[N_b, N_h]`, strictly positive
    pub sigma: Tensor,
    /// `[N_b, N_k, N_h]`
    pub loadings: Tensor,
}

impl FactorParams {
    pub fn new(mu: Tensor, sigma: Tensor, loadings: Tensor) -> Result<Self> {
        let (ms, ss, fs) = (mu.shape(), sigma.shape(), loadings.shape());
        if ms.len() != 2 || ss != ms || fs.len() != 3 || fs[0] != ms[0] || fs[2] != ms[1] {
            return Err(Error::shape(
                "factor params",
                format!("mu {:?}, sigma {:?}, loadings {:?}", ms, ss, fs),
            ));
        }
        Ok(Self { mu, sigma, loadings })
    }

    /// Build from plain buffers as constants on `tape`.
    pub fn constant(
        tape: &Tape,
        dims: (usize, usize, usize),
        mu: Vec<f64>,
        sigma: Vec<f64>,
        loadings: Vec<f64>,
    ) -> Result<Self> {
        let (nb, nk, nh) = dims;
        Self::new(
            tape.constant(&[nb, nh], mu)?,
            tape.constant(&[nb, nh], sigma)?,
            tape.constant(&[nb, nk, nh], loadings)?,
        )
    }

    /// Build from plain buffers as differentiable leaves on `tape`.
    pub fn leaves(
        tape: &Tape,
        dims: (usize, usize, usize),
        mu: Vec<f64>,
        sigma: Vec<f64>,
        loadings: Vec<f64>,
    ) -> Result<Self> {
        let (nb, nk, nh) = dims;
        Self::new(
            tape.leaf(&[nb, nh], mu)?,
            tape.leaf(&[nb, nh], sigma)?,
            tape.leaf(&[nb, nk, nh], loadings)?,
        )
    }

    pub fn n_bottom(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn n_horizons(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.shape()[1]
    }

    /// `Diag(σ²_η) + F_η·F_ηᵀ` for the 1-based horizon `horizon`, row-major `N_b × N_b`.
    pub fn implied_covariance(&self, horizon: usize) -> Result<Vec<f64>> {
        let (nb, nk, nh) = (self.n_bottom(), self.n_factors(), self.n_horizons());
        if horizon == 0 || horizon > nh {
            return Err(Error::InvalidArgument(format!("horizon {} outside 1..={}", horizon, nh)));
        }
        let h = horizon - 1;
        let (sig, f) = (self.sigma.values(), self.loadings.values());
        let load = |b: usize, k: usize| f[(b * nk + k) * nh + h];
        let mut cov = vec![0.0; nb * nb];
        for i in 0..nb {
            for j in 0..nb {
                cov[i * nb + j] = (0..nk).map(|k| load(i, k) * load(j, k)).sum();
            }
            cov[i * nb + i] += sig[i * nh + h].powi(2);
        }
        Ok(cov)
    }
}

/// Standard normal draws for one sampling pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    /// Idiosyncratic draws, `[N_b, N_h, N_s]`.
    pub z: Vec<f64>,
    /// Shared factor draws, `[N_k, N_h, N_s]`.
    pub eps: Vec<f64>,
    pub n_bottom: usize,
    pub n_factors: usize,
    pub n_horizons: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// Deterministic i.i.d. standard normal draws for the given dimensions.
pub fn draw_noise(n_bottom: usize, n_factors: usize, n_horizons: usize, n_samples: usize, seed: u64) -> Result<NoiseDraws> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    if n_bottom == 0 || n_horizons == 0 {
        return Err(Error::InvalidArgument("bottom and horizon dimensions must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let z = draw(n_bottom * n_horizons * n_samples);
    let eps = draw(n_factors * n_horizons * n_samples);
    Ok(NoiseDraws {
        z,
        eps,
        n_bottom,
        n_factors,
        n_horizons,
        n_samples,
        seed,
    })
}

/// Plain (off-tape) sample block `[rows, horizons, samples]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    pub n_rows: usize,
    pub n_horizons: usize,
    pub n_samples: usize,
    pub values: Vec<f64>,
}

impl SampleBlock {
    pub fn new(n_rows: usize, n_horizons: usize, n_samples: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_rows * n_horizons * n_samples {
            return Err(Error::shape(
                "sample block",
                format!("{}x{}x{} needs {} values, got {}", n_rows, n_horizons, n_samples, n_rows * n_horizons * n_samples, values.len()),
            ));
        }
        Ok(Self {
            n_rows,
            n_horizons,
            n_samples,
            values,
        })
    }

    /// Samples for one (row, horizon), horizon 0-based.
    pub fn cell(&self, row: usize, h: usize) -> &[f64] {
        let start = (row * self.n_horizons + h) * self.n_samples;
        &self.values[start..start + self.n_samples]
    }

    /// Per-(row, horizon) sample means, `[rows, horizons]`.
    pub fn mean(&self) -> Vec<f64> {
        self.values
            .chunks(self.n_samples)
            .map(|c| c.iter().sum::<f64>() / self.n_samples as f64)
            .collect()
    }

    /// Type-7 empirical quantiles, `[rows, horizons, levels]`.
    pub fn quantiles(&self, levels: &[f64]) -> Result<Vec<f64>> {
        if self.n_samples < 2 {
            return Err(Error::InvalidArgument("quantiles need at least 2 samples".into()));
        }
        if let Some(q) = levels.iter().find(|&&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::InvalidArgument(format!("quantile level {} outside (0, 1)", q)));
        }
        let mut out = Vec::with_capacity(self.n_rows * self.n_horizons * levels.len());
        let mut buf = vec![0.0; self.n_samples];
        for cell in self.values.chunks(self.n_samples) {
            buf.copy_from_slice(cell);
            buf.sort_by(f64::total_cmp);
            out.extend(levels.iter().map(|&q| quantile_sorted(&buf, q)));
        }
        Ok(out)
    }

    /// Largest deviation between an aggregate row and the sum of its members.
    pub fn max_coherence_error(&self, s: &AggregationMatrix) -> f64 {
        let width = self.n_horizons * self.n_samples;
        let na = s.n_aggregate();
        let mut worst = 0.0f64;
        for r in 0..na {
            for w in 0..width {
                let total: f64 = s.members(r).iter().map(|&c| self.values[(na + c) * width + w]).sum();
                worst = worst.max((self.values[r * width + w] - total).abs());
            }
        }
        worst
    }
}

/// Linear interpolation between order statistics (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Samples from the factor model, kept on the tape.
#[derive(Debug, Clone)]
pub struct SampleSet {
    /// Pre-clipping bottom samples `[N_b, N_h, N_s]`.
    pub bottom_raw: Tensor,
    /// Clipped and aggregated samples `[N_a + N_b, N_h, N_s]`.
    pub coherent: Tensor,
    pub noise: NoiseDraws,
}

impl SampleSet {
    pub fn coherent_block(&self) -> SampleBlock {
        let s = self.coherent.shape();
        SampleBlock {
            n_rows: s[0],
            n_horizons: s[1],
            n_samples: s[2],
            values: self.coherent.values().to_vec(),
        }
    }

    pub fn bottom_raw_block(&self) -> SampleBlock {
        let s = self.bottom_raw.shape();
        SampleBlock {
            n_rows: s[0],
            n_horizons: s[1],
            n_samples: s[2],
            values: self.bottom_raw.values().to_vec(),
        }
    }

    /// Type-7 quantiles of the coherent samples, `[N_a + N_b, N_h, levels]`.
    pub fn empirical_quantiles(&self, levels: &[f64]) -> Result<Vec<f64>> {
        self.coherent_block().quantiles(levels)
    }
}

/// Reparameterized draw from the factor model followed by coherent aggregation.
pub fn sample(params: &FactorParams, noise: &NoiseDraws, s: &AggregationMatrix) -> Result<SampleSet> {
    let (nb, nk, nh) = (params.n_bottom(), params.n_factors(), params.n_horizons());
    let ns = noise.n_samples;
    if noise.n_bottom != nb || noise.n_factors != nk || noise.n_horizons != nh {
        return Err(Error::shape(
            "sample",
            format!(
                "noise dims (b={}, k={}, h={}) do not match params (b={}, k={}, h={})",
                noise.n_bottom, noise.n_factors, noise.n_horizons, nb, nk, nh
            ),
        ));
    }
    if s.n_bottom() != nb {
        return Err(Error::shape("sample", format!("S has {} columns, params have {} series", s.n_bottom(), nb)));
    }
    if let Some(bad) = params.sigma.values().iter().find(|&&v| v.is_nan() || v <= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", bad)));
    }
    let tape = params.mu.tape();
    let z = tape.constant(&[nb, nh, ns], noise.z.clone())?;
    let mu = params.mu.reshape(&[nb, nh, 1])?;
    let sigma = params.sigma.reshape(&[nb, nh, 1])?;
    let mut raw = mu.add(&sigma.mul(&z)?)?;
    if nk > 0 {
        // [N_k, N_h, N_s] -> [N_h, N_k, N_s], permuted off-tape since it is a constant
        let mut eps_h = vec![0.0; nk * nh * ns];
        for k in 0..nk {
            for h in 0..nh {
                let src = (k * nh + h) * ns;
                let dst = (h * nk + k) * ns;
                eps_h[dst..dst + ns].copy_from_slice(&noise.eps[src..src + ns]);
            }
        }
        let eps = tape.constant(&[nh, nk, ns], eps_h)?;
        let loaded = params.loadings.permute(&[2, 0, 1])?.matmul(&eps)?.permute(&[1, 0, 2])?;
        raw = raw.add(&loaded)?;
    }
    let clipped = raw.relu().reshape(&[nb, nh * ns])?;
    let smat = tape.constant(&[s.n_rows(), nb], s.as_slice().to_vec())?;
    let coherent = smat.matmul(&clipped)?.reshape(&[s.n_rows(), nh, ns])?;
    Ok(SampleSet {
        bottom_raw: raw,
        coherent,
        noise: noise.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::tests::fig1_spec;
    use crate::hierarchy::HierarchySpec;
    use rand::Rng;

    fn fig1() -> AggregationMatrix {
        AggregationMatrix::build(&fig1_spec()).unwrap()
    }

    #[test]
    fn noise_is_deterministic_and_allows_no_factors() {
        let a = draw_noise(3, 2, 4, 10, 42).unwrap();
        let b = draw_noise(3, 2, 4, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.z, draw_noise(3, 2, 4, 10, 43).unwrap().z);
        let none = draw_noise(3, 0, 4, 10, 1).unwrap();
        assert!(none.eps.is_empty());
        assert!(draw_noise(3, 1, 4, 0, 1).is_err());
    }

    #[test]
    fn noise_moments_per_slice() {
        let n = 100_000;
        let d = draw_noise(2, 1, 1, n, 9).unwrap();
        let slices = d.z.chunks(n).chain(d.eps.chunks(n));
        for slice in slices {
            let mean = slice.iter().sum::<f64>() / n as f64;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 0.02, "mean {}", mean);
            assert!((var - 1.0).abs() < 0.02, "var {}", var);
        }
    }

    #[test]
    fn noise_free_sample_equals_location() {
        let tape = Tape::new();
        let s = fig1();
        let mu = vec![1., 2., 3., 4., 5., 6., 7., 8.];
        let p = FactorParams::constant(&tape, (4, 0, 2), mu.clone(), vec![1.0; 8], vec![]).unwrap();
        let mut noise = draw_noise(4, 0, 2, 3, 0).unwrap();
        noise.z.iter_mut().for_each(|v| *v = 0.0);
        let set = sample(&p, &noise, &s).unwrap();
        for b in 0..4 {
            for h in 0..2 {
                for k in 0..3 {
                    assert_eq!(set.bottom_raw.values()[(b * 2 + h) * 3 + k], mu[b * 2 + h]);
                }
            }
        }
    }

    #[test]
    fn shared_factor_is_comonotone() {
        let tape = Tape::new();
        let spec = HierarchySpec::new(vec!["a".into(), "b".into()], true);
        let s = AggregationMatrix::build(&spec).unwrap();
        let p = FactorParams::constant(&tape, (2, 1, 1), vec![0., 0.], vec![1e-9, 1e-9], vec![1., 1.]).unwrap();
        let mut noise = draw_noise(2, 1, 1, 1, 0).unwrap();
        noise.eps = vec![1.0];
        let set = sample(&p, &noise, &s).unwrap();
        let v = set.coherent.values();
        assert!((v[0] - 2.0).abs() < 1e-6);
        assert!((v[1] - 1.0).abs() < 1e-6 && (v[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let tape = Tape::new();
        let s = fig1();
        let p = FactorParams::constant(&tape, (4, 1, 2), vec![0.; 8], vec![0.0; 8], vec![0.; 8]).unwrap();
        let noise = draw_noise(4, 1, 2, 5, 0).unwrap();
        assert!(matches!(sample(&p, &noise, &s), Err(Error::InvalidArgument(_))));
        let p = FactorParams::constant(&tape, (4, 1, 2), vec![0.; 8], vec![1.0; 8], vec![0.; 8]).unwrap();
        let wrong = draw_noise(4, 2, 2, 5, 0).unwrap();
        assert!(matches!(sample(&p, &wrong, &s), Err(Error::Shape { .. })));
        assert!(FactorParams::new(p.mu.clone(), p.mu.clone(), p.mu.clone()).is_err());
    }

    #[test]
    fn coherent_output_is_exact_and_nonnegative() {
        let tape = Tape::new();
        let s = fig1();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let p = FactorParams::constant(&tape, (4, 2, 3), r(12, -1.0, 2.0), r(12, 0.1, 1.0), r(24, -1.0, 1.0)).unwrap();
        let set = sample(&p, &draw_noise(4, 2, 3, 200, 5).unwrap(), &s).unwrap();
        let block = set.coherent_block();
        assert_eq!(block.max_coherence_error(&s), 0.0);
        assert!(block.values.iter().all(|&v| v >= 0.0));
        // bottom block equals relu(raw) exactly
        let na = s.n_aggregate() * 3 * 200;
        for (c, r) in block.values[na..].iter().zip(set.bottom_raw.values()) {
            assert_eq!(*c, r.max(0.0));
        }
    }

    #[test]
    fn implied_covariance_examples() {
        let tape = Tape::new();
        let p = FactorParams::constant(&tape, (2, 1, 1), vec![0., 0.], vec![1., 1.], vec![1., 1.]).unwrap();
        assert_eq!(p.implied_covariance(1).unwrap(), vec![2., 1., 1., 2.]);
        assert!(p.implied_covariance(0).is_err() && p.implied_covariance(2).is_err());
        let d = FactorParams::constant(&tape, (2, 0, 1), vec![0., 0.], vec![2., 3.], vec![]).unwrap();
        assert_eq!(d.implied_covariance(1).unwrap(), vec![4., 0., 0., 9.]);
    }

    /// Monte Carlo covariance of the pre-clip samples at horizon `h` (0-based).
    fn empirical_cov(raw: &[f64], nb: usize, nh: usize, ns: usize, h: usize) -> Vec<f64> {
        let cell = |b: usize| &raw[(b * nh + h) * ns..(b * nh + h + 1) * ns];
        let means: Vec<f64> = (0..nb).map(|b| cell(b).iter().sum::<f64>() / ns as f64).collect();
        let mut cov = vec![0.0; nb * nb];
        for i in 0..nb {
            for j in 0..nb {
                let (ci, cj) = (cell(i), cell(j));
                cov[i * nb + j] =
                    ci.iter().zip(cj).map(|(a, b)| (a - means[i]) * (b - means[j])).sum::<f64>() / (ns - 1) as f64;
            }
        }
        cov
    }

    #[test]
    fn covariance_matches_monte_carlo() {
        let tape = Tape::new();
        let s = fig1();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut r = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let p = FactorParams::constant(&tape, (4, 2, 1), r(4, -1.0, 1.0), r(4, 0.3, 1.5), r(8, -1.0, 1.0)).unwrap();
        let ns = 200_000;
        let set = sample(&p, &draw_noise(4, 2, 1, ns, 23).unwrap(), &s).unwrap();
        let emp = empirical_cov(set.bottom_raw.values(), 4, 1, ns, 0);
        let imp = p.implied_covariance(1).unwrap();
        let max_diag = (0..4).map(|i| imp[i * 4 + i]).fold(0.0, f64::max);
        for (e, i) in emp.iter().zip(&imp) {
            assert!((e - i).abs() <= 0.05 * max_diag, "{} vs {}", e, i);
        }
    }

    #[test]
    fn small_sigma_single_factor_gives_unit_correlation() {
        let tape = Tape::new();
        let s = AggregationMatrix::build(&HierarchySpec::new((0..3).map(|i| i.to_string()).collect(), true)).unwrap();
        let p = FactorParams::constant(&tape, (3, 1, 1), vec![0.; 3], vec![1e-3; 3], vec![1.0; 3]).unwrap();
        let ns = 10_000;
        let set = sample(&p, &draw_noise(3, 1, 1, ns, 2).unwrap(), &s).unwrap();
        let cov = empirical_cov(set.bottom_raw.values(), 3, 1, ns, 0);
        for i in 0..3 {
            for j in 0..3 {
                let corr = cov[i * 3 + j] / (cov[i * 3 + i] * cov[j * 3 + j]).sqrt();
                assert!(corr > 0.99);
            }
        }
    }

    #[test]
    fn quantile_examples() {
        let c = SampleBlock::new(1, 1, 5, vec![3.0; 5]).unwrap();
        assert_eq!(c.quantiles(&[0.1, 0.5, 0.9]).unwrap(), vec![3.0; 3]);
        let grid = SampleBlock::new(1, 1, 101, (0..=100).rev().map(f64::from).collect()).unwrap();
        assert_eq!(grid.quantiles(&[0.5]).unwrap(), vec![50.0]);
        assert!(grid.quantiles(&[0.0]).is_err() && grid.quantiles(&[1.0]).is_err());
        assert!(SampleBlock::new(1, 1, 1, vec![1.0]).unwrap().quantiles(&[0.5]).is_err());
    }

    #[test]
    fn normal_quantile_matches_inverse_cdf() {
        let tape = Tape::new();
        let s = AggregationMatrix::build(&HierarchySpec::new(vec!["x".into()], false)).unwrap();
        // mu large enough that clipping never triggers; quantile shifts back
        let p = FactorParams::constant(&tape, (1, 0, 1), vec![50.0], vec![1.0], vec![]).unwrap();
        let set = sample(&p, &draw_noise(1, 0, 1, 100_000, 8).unwrap(), &s).unwrap();
        let q = set.empirical_quantiles(&[0.9]).unwrap();
        assert!((q[0] - 50.0 - 1.2816).abs() < 0.02, "{}", q[0]);
    }

    #[test]
    fn quantiles_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = SampleBlock::new(2, 2, 50, (0..200).map(|_| rng.random_range(0.0..10.0)).collect()).unwrap();
        let levels: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let q = block.quantiles(&levels).unwrap();
        for cell in q.chunks(levels.len()) {
            assert!(cell.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn sample_gradient_wrt_location_matches_finite_difference() {
        let s = fig1();
        let (nb, nk, nh, ns) = (4, 2, 2, 30);
        let noise = draw_noise(nb, nk, nh, ns, 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let mu0: Vec<f64> = (0..nb * nh).map(|_| rng.random_range(8.0..10.0)).collect();
        let sig: Vec<f64> = (0..nb * nh).map(|_| rng.random_range(0.1..0.5)).collect();
        let load: Vec<f64> = (0..nb * nk * nh).map(|_| rng.random_range(-0.3..0.3)).collect();
        let run = |mu: &[f64]| {
            let tape = Tape::new();
            let p = FactorParams::leaves(&tape, (nb, nk, nh), mu.to_vec(), sig.clone(), load.clone()).unwrap();
            let set = sample(&p, &noise, &s).unwrap();
            assert!(set.bottom_raw.values().iter().all(|&v| v > 0.0));
            let l = set.coherent.mean();
            (l.item(), l.backward().unwrap().get_or_zeros(&p.mu))
        };
        let (_, g) = run(&mu0);
        let h = 1e-5;
        for i in 0..mu0.len() {
            let mut up = mu0.clone();
            up[i] += h;
            let mut dn = mu0.clone();
            dn[i] -= h;
            let fd = (run(&up).0 - run(&dn).0) / (2.0 * h);
            assert!((g[i] - fd).abs() / fd.abs() < 1e-5, "{} vs {}", g[i], fd);
            // all samples active: (1/N_s)·(column sum of S)/(rows·horizons·samples) scaling
            let b = i / nh;
            let colsum: f64 = (0..s.n_rows()).map(|r| s.get(r, b)).sum();
            let expect = colsum / (s.n_rows() * nh) as f64;
            assert!((g[i] - expect).abs() < 1e-12);
        }
    }
}
