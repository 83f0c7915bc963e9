//! Training objectives as fused tape operations.
//!
//! The sample-based losses score the coherent samples drawn with fixed
//! noise, so gradients reach `(μ, σ, F)` through the reparameterized draw.
//! The Gaussian likelihood works on the unclipped bottom-level model and
//! never forms a dense `N_b × N_b` matrix: inverse and determinant go through
//! the rank-`N_k` identity `Σ = D + F Fᵀ`, `C = I + Fᵀ D⁻¹ F`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{sample, FactorParams, NoiseDraws};
use crate::hierarchy::AggregationMatrix;
use crate::scoring::{EnergyNorm, ScoreConfig};
use crate::tensor::{sign, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Crps,
    Energy,
    Nll,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "crps" => Ok(Objective::Crps),
            "energy" => Ok(Objective::Energy),
            "nll" => Ok(Objective::Nll),
            other => Err(Error::Config(format!("unknown objective '{}' (expected crps, energy or nll)", other))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Crps => "crps",
            Objective::Energy => "energy",
            Objective::Nll => "nll",
        })
    }
}

fn check_targets(samples: &Tensor, targets: &[f64], op: &'static str) -> Result<(usize, usize, usize)> {
    let sh = samples.shape();
    if sh.len() != 3 || targets.len() != sh[0] * sh[1] {
        return Err(Error::shape(op, format!("samples {:?}, {} targets", sh, targets.len())));
    }
    if sh[2] < 2 {
        return Err(Error::InvalidArgument(format!("{} needs at least 2 samples, got {}", op, sh[2])));
    }
    Ok((sh[0], sh[1], sh[2]))
}

/// Fair CRPS for every `(row, horizon)` cell of a `[R, H, S]` sample tensor.
/// Returns `[R, H]`.
pub fn crps_cells(samples: &Tensor, targets: &[f64]) -> Result<Tensor> {
    let (nr, nh, ns) = check_targets(samples, targets, "crps")?;
    let x = samples.values();
    let n = ns as f64;
    let mut value = vec![0.0; nr * nh];
    let mut grad = vec![0.0; x.len()];
    let mut order: Vec<usize> = (0..ns).collect();
    for cell in 0..nr * nh {
        let xs = &x[cell * ns..(cell + 1) * ns];
        let y = targets[cell];
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let (mut abs_err, mut spread) = (0.0, 0.0);
        let g = &mut grad[cell * ns..(cell + 1) * ns];
        let mut i = 0;
        while i < ns {
            // tie group [i, j): equal values contribute no pairwise slope to each other
            let mut j = i + 1;
            while j < ns && xs[order[j]] == xs[order[i]] {
                j += 1;
            }
            let (less, greater) = (i as f64, (ns - j) as f64);
            for &k in &order[i..j] {
                abs_err += (xs[k] - y).abs();
                spread += (less - greater) * xs[k];
                g[k] = sign(xs[k] - y) / n - (less - greater) / (n * (n - 1.0));
            }
            i = j;
        }
        value[cell] = abs_err / n - spread / (n * (n - 1.0));
    }
    let tape = samples.tape().clone();
    tape.custom(&[samples], vec![nr, nh], value, move |up| {
        let mut out = grad.clone();
        for (cell, &u) in up.iter().enumerate() {
            out[cell * ns..(cell + 1) * ns].iter_mut().for_each(|v| *v *= u);
        }
        vec![out]
    })
}

/// Sum over all rows and horizons of the fair CRPS of the coherent samples.
pub fn loss_crps(targets: &[f64], params: &FactorParams, s: &AggregationMatrix, noise: &NoiseDraws) -> Result<Tensor> {
    let set = sample(params, noise, s)?;
    Ok(crps_cells(&set.coherent, targets)?.sum())
}

fn pow_norm_grad(d: &[f64], beta: f64) -> (f64, f64) {
    let sq: f64 = d.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return (0.0, 0.0);
    }
    let norm = sq.sqrt();
    // value ‖d‖^β and the factor β‖d‖^(β−2) multiplying d in the gradient
    (norm.powf(beta), beta * norm.powf(beta - 2.0))
}

/// Fair energy score of `[R, H, S]` samples against `[R, H]` targets.
pub fn energy_cells(samples: &Tensor, targets: &[f64], beta: f64, norm: EnergyNorm) -> Result<Tensor> {
    let (nr, nh, ns) = check_targets(samples, targets, "energy score")?;
    if !(beta > 0.0 && beta < 2.0) {
        return Err(Error::InvalidArgument(format!("energy score beta {} outside (0, 2)", beta)));
    }
    let x = samples.values();
    // groups of flat indices sharing one norm
    let groups: Vec<Vec<usize>> = match norm {
        EnergyNorm::Joint => vec![(0..nr * nh).collect()],
        EnergyNorm::PerHorizon => (0..nh).map(|h| (0..nr).map(|r| r * nh + h).collect()).collect(),
    };
    let n = ns as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; x.len()];
    let mut d = Vec::new();
    for cells in &groups {
        for i in 0..ns {
            d.clear();
            d.extend(cells.iter().map(|&c| x[c * ns + i] - targets[c]));
            let (v, f) = pow_norm_grad(&d, beta);
            value += v / n;
            for (k, &c) in cells.iter().enumerate() {
                grad[c * ns + i] += f * d[k] / n;
            }
        }
        let pair_w = 1.0 / (n * (n - 1.0));
        for i in 0..ns {
            for j in (i + 1)..ns {
                d.clear();
                d.extend(cells.iter().map(|&c| x[c * ns + i] - x[c * ns + j]));
                let (v, f) = pow_norm_grad(&d, beta);
                value -= v * pair_w;
                if f != 0.0 {
                    for (k, &c) in cells.iter().enumerate() {
                        grad[c * ns + i] -= f * d[k] * pair_w;
                        grad[c * ns + j] += f * d[k] * pair_w;
                    }
                }
            }
        }
    }
    let tape = samples.tape().clone();
    tape.custom(&[samples], vec![], vec![value], move |up| vec![grad.iter().map(|g| g * up[0]).collect()])
}

/// Energy score of the flattened coherent sample block.
pub fn loss_energy(
    targets: &[f64],
    params: &FactorParams,
    s: &AggregationMatrix,
    noise: &NoiseDraws,
    config: &ScoreConfig,
) -> Result<Tensor> {
    let set = sample(params, noise, s)?;
    energy_cells(&set.coherent, targets, config.beta, config.energy_norm)
}

/// Negative log density of `N(μ_η, Diag(σ_η²) + F_η F_ηᵀ)` at the bottom
/// targets, summed over horizons. `y` is `[N_b, N_h]`.
pub fn gaussian_nll(params: &FactorParams, y: &[f64]) -> Result<Tensor> {
    let (nb, nk, nh) = (params.n_bottom(), params.n_factors(), params.n_horizons());
    if y.len() != nb * nh {
        return Err(Error::shape("nll", format!("{} targets for {}x{}", y.len(), nb, nh)));
    }
    let (mu, sig, f) = (params.mu.values(), params.sigma.values(), params.loadings.values());
    let load = |b: usize, k: usize, h: usize| f[(b * nk + k) * nh + h];
    let mut value = 0.0;
    let mut g_mu = vec![0.0; mu.len()];
    let mut g_sig = vec![0.0; sig.len()];
    let mut g_f = vec![0.0; f.len()];
    for h in 0..nh {
        let d: Vec<f64> = (0..nb).map(|b| sig[b * nh + h].powi(2)).collect();
        if let Some(b) = d.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Numerical(format!(
                "nonpositive variance {} for series {} at horizon {}",
                d[b],
                b,
                h + 1
            )));
        }
        let r: Vec<f64> = (0..nb).map(|b| y[b * nh + h] - mu[b * nh + h]).collect();
        // C = I + Fᵀ D⁻¹ F
        let c = DMatrix::from_fn(nk, nk, |i, j| {
            let v: f64 = (0..nb).map(|b| load(b, i, h) * load(b, j, h) / d[b]).sum();
            v + if i == j { 1.0 } else { 0.0 }
        });
        let chol = c.cholesky().ok_or_else(|| {
            Error::Numerical(format!("capacitance matrix at horizon {} is not positive definite", h + 1))
        })?;
        let logdet_c: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let c_inv = chol.inverse();
        // u = Fᵀ D⁻¹ r, α = D⁻¹ r − D⁻¹ F C⁻¹ u
        let u: Vec<f64> = (0..nk).map(|k| (0..nb).map(|b| load(b, k, h) * r[b] / d[b]).sum()).collect();
        let cu: Vec<f64> = (0..nk).map(|i| (0..nk).map(|j| c_inv[(i, j)] * u[j]).sum()).collect();
        let alpha: Vec<f64> = (0..nb)
            .map(|b| (r[b] - (0..nk).map(|k| load(b, k, h) * cu[k]).sum::<f64>()) / d[b])
            .collect();
        let quad: f64 = r.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let logdet: f64 = d.iter().map(|v| v.ln()).sum::<f64>() + logdet_c;
        if !logdet.is_finite() || !quad.is_finite() {
            return Err(Error::Numerical(format!("log-determinant {} / quadratic form {} at horizon {}", logdet, quad, h + 1)));
        }
        value += 0.5 * (quad + logdet + nb as f64 * (2.0 * PI).ln());

        // Σ⁻¹F = D⁻¹ F C⁻¹
        let sinv_f = |b: usize, k: usize| (0..nk).map(|j| load(b, j, h) * c_inv[(j, k)]).sum::<f64>() / d[b];
        let alpha_f: Vec<f64> = (0..nk).map(|k| (0..nb).map(|b| alpha[b] * load(b, k, h)).sum()).collect();
        for b in 0..nb {
            // (Σ⁻¹)_bb = 1/d_b − Σ_jl (F_bj/d_b) C⁻¹_jl (F_bl/d_b)
            let mut corr = 0.0;
            for j in 0..nk {
                for l in 0..nk {
                    corr += load(b, j, h) * c_inv[(j, l)] * load(b, l, h);
                }
            }
            let sinv_bb = 1.0 / d[b] - corr / (d[b] * d[b]);
            let i = b * nh + h;
            g_mu[i] = -alpha[b];
            g_sig[i] = sig[i] * (sinv_bb - alpha[b] * alpha[b]);
            for k in 0..nk {
                g_f[(b * nk + k) * nh + h] = sinv_f(b, k) - alpha[b] * alpha_f[k];
            }
        }
    }
    let tape = params.mu.tape().clone();
    tape.custom(
        &[&params.mu, &params.sigma, &params.loadings],
        vec![],
        vec![value],
        move |up| {
            let s = up[0];
            vec![
                g_mu.iter().map(|g| g * s).collect(),
                g_sig.iter().map(|g| g * s).collect(),
                g_f.iter().map(|g| g * s).collect(),
            ]
        },
    )
}

/// Likelihood loss on the bottom block of `[N, N_h]` targets.
pub fn loss_nll(targets: &[f64], params: &FactorParams, s: &AggregationMatrix) -> Result<Tensor> {
    let nh = params.n_horizons();
    let (n, na) = (s.n_rows(), s.n_aggregate());
    if targets.len() != n * nh {
        return Err(Error::shape("nll", format!("{} targets for {} rows x {} horizons", targets.len(), n, nh)));
    }
    gaussian_nll(params, &targets[na * nh..])
}

/// Loss for `objective` on one forecast window.
pub fn objective_loss(
    objective: Objective,
    targets: &[f64],
    params: &FactorParams,
    s: &AggregationMatrix,
    noise: &NoiseDraws,
    config: &ScoreConfig,
) -> Result<Tensor> {
    match objective {
        Objective::Crps => loss_crps(targets, params, s, noise),
        Objective::Energy => loss_energy(targets, params, s, noise, config),
        Objective::Nll => loss_nll(targets, params, s),
    }
}
