//! The forecasting network.
//!
//! History of every hierarchy row runs through a shared stack of causal
//! dilated convolutions (kernel 2, ReLU). The final-step encodings of all
//! rows are mixed by a residual cross-series MLP into one context per bottom
//! series. Static and known-future inputs get their own one-layer encoders.
//! A two-stage decoder then produces a horizon-agnostic context, one
//! context per horizon, and finally a linear head shared across horizons
//! that emits `(μ, σ, F)` for the factor model.
//!
//! Targets are normalised per row by the mean absolute value of the history
//! window. Output location, scale and loadings are mapped back to the
//! original units with the bottom-row scales, so the network works in
//! scale-free units while the factor model sees real values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::FactorParams;
use crate::hierarchy::AggregationMatrix;
use crate::tensor::{Tape, Tensor};

/// Taps per convolution layer.
pub const KERNEL_SIZE: usize = 2;
/// Added to the softplus output so scales stay strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub dilations: Vec<usize>,
    pub conv_channels: usize,
    pub static_dim: usize,
    pub future_dim: usize,
    pub horizon_agnostic_dim: usize,
    pub horizon_specific_dim: usize,
    /// 0 disables the cross-series MLP.
    pub cross_series_hidden: usize,
    pub n_factors: usize,
    pub horizon: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            dilations: vec![1, 2, 4, 8],
            conv_channels: 10,
            static_dim: 5,
            future_dim: 20,
            horizon_agnostic_dim: 20,
            horizon_specific_dim: 5,
            cross_series_hidden: 50,
            n_factors: 2,
            horizon: 12,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("conv_channels", self.conv_channels),
            ("static_dim", self.static_dim),
            ("future_dim", self.future_dim),
            ("horizon_agnostic_dim", self.horizon_agnostic_dim),
            ("horizon_specific_dim", self.horizon_specific_dim),
            ("horizon", self.horizon),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{} must be at least 1", name)));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("dilations must be a non-empty list of positive integers".into()));
        }
        Ok(())
    }

    /// History steps that can influence the last encoding.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().map(|d| d * (KERNEL_SIZE - 1)).sum::<usize>()
    }
}

/// Sizes of the inputs the network is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub n_rows: usize,
    pub n_bottom: usize,
    pub hist_channels: usize,
    pub future_channels: usize,
    pub static_features: usize,
}

/// Inputs for one forecast creation date.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub n_bottom: usize,
    pub hist_channels: usize,
    pub context: usize,
    /// `[N_b, F_h, T]`
    pub historical: Vec<f64>,
    pub future_channels: usize,
    pub horizon: usize,
    /// `[N_b, F_f, N_h]`
    pub future: Vec<f64>,
    pub static_features: usize,
    /// `[N_b, F_s]`
    pub static_values: Vec<f64>,
    /// Historical channel holding the target.
    pub target_channel: usize,
    /// Future channels measured in target units (normalised like the target).
    pub future_in_target_units: Vec<bool>,
}

impl FeatureBundle {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("historical", self.historical.len(), self.n_bottom * self.hist_channels * self.context),
            ("future", self.future.len(), self.n_bottom * self.future_channels * self.horizon),
            ("static", self.static_values.len(), self.n_bottom * self.static_features),
            ("future unit flags", self.future_in_target_units.len(), self.future_channels),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::shape("feature bundle", format!("{} has {} values, expected {}", name, got, want)));
            }
        }
        if self.target_channel >= self.hist_channels {
            return Err(Error::shape("feature bundle", format!("target channel {} of {}", self.target_channel, self.hist_channels)));
        }
        Ok(())
    }

    fn target_history(&self, b: usize) -> &[f64] {
        let start = (b * self.hist_channels + self.target_channel) * self.context;
        &self.historical[start..start + self.context]
    }
}

/// Learnable tensors as plain buffers, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl NetworkParams {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        self.values.push((0..n).map(|_| rng.random_range(-bound..=bound)).collect());
        self.names.push(name);
        self.shapes.push(shape);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

/// Configured network with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub dims: InputDims,
    pub params: NetworkParams,
}

/// Parameters registered on a tape for one forward pass.
pub struct BoundParams {
    pub tensors: Vec<Tensor>,
}

struct Cursor<'a> {
    tensors: &'a [Tensor],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> &'a Tensor {
        let t = &self.tensors[self.pos];
        self.pos += 1;
        t
    }
}

fn representative(s: &AggregationMatrix, row: usize) -> usize {
    let labels = &s.row_labels()[s.n_aggregate()..];
    *s.members(row).iter().min_by_key(|&&b| &labels[b]).expect("rows have members")
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add(b)
}

impl Network {
    /// Fresh network with weights uniform in `±1/√fan_in`.
    pub fn new(config: NetworkConfig, dims: InputDims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.n_bottom == 0 || dims.n_rows < dims.n_bottom || dims.hist_channels == 0 || dims.static_features == 0 {
            return Err(Error::Config(format!("unusable input dimensions {:?}", dims)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetworkParams {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        };
        let c = config.conv_channels;
        let mut c_in = dims.hist_channels;
        for l in 0..config.dilations.len() {
            p.push(format!("conv{}.weight", l), vec![c, c_in, KERNEL_SIZE], c_in * KERNEL_SIZE, &mut rng);
            p.push(format!("conv{}.bias", l), vec![c], c_in * KERNEL_SIZE, &mut rng);
            c_in = c;
        }
        let h = config.cross_series_hidden;
        if h > 0 {
            let flat = dims.n_rows * c;
            p.push("cross.w1".into(), vec![flat, h], flat, &mut rng);
            p.push("cross.b1".into(), vec![h], flat, &mut rng);
            p.push("cross.w2".into(), vec![h, dims.n_bottom * c], h, &mut rng);
            p.push("cross.b2".into(), vec![dims.n_bottom * c], h, &mut rng);
        }
        let fs = dims.static_features;
        p.push("static.weight".into(), vec![fs, config.static_dim], fs, &mut rng);
        p.push("static.bias".into(), vec![config.static_dim], fs, &mut rng);
        let ff = dims.future_channels * config.horizon;
        p.push("future.weight".into(), vec![ff.max(1), config.future_dim], ff, &mut rng);
        p.push("future.bias".into(), vec![config.future_dim], ff, &mut rng);
        let ctx = c + config.static_dim + config.future_dim;
        p.push("agnostic.weight".into(), vec![ctx, config.horizon_agnostic_dim], ctx, &mut rng);
        p.push("agnostic.bias".into(), vec![config.horizon_agnostic_dim], ctx, &mut rng);
        let sp = config.horizon * config.horizon_specific_dim;
        p.push("specific.weight".into(), vec![ctx, sp], ctx, &mut rng);
        p.push("specific.bias".into(), vec![sp], ctx, &mut rng);
        let head_in = config.horizon_specific_dim + config.horizon_agnostic_dim + dims.future_channels;
        let head_out = 2 + config.n_factors;
        p.push("head.weight".into(), vec![head_in, head_out], head_in, &mut rng);
        p.push("head.bias".into(), vec![head_out], head_in, &mut rng);
        Ok(Self { config, dims, params: p })
    }

    /// Register every parameter on `tape`, as differentiable leaves or constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundParams> {
        let tensors = self
            .params
            .shapes
            .iter()
            .zip(&self.params.values)
            .map(|(s, v)| if trainable { tape.leaf(s, v.clone()) } else { tape.constant(s, v.clone()) })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { tensors })
    }

    fn check_inputs(&self, bundle: &FeatureBundle, s: &AggregationMatrix) -> Result<()> {
        bundle.validate()?;
        let d = &self.dims;
        if s.n_rows() != d.n_rows || s.n_bottom() != d.n_bottom {
            return Err(Error::shape(
                "network",
                format!("hierarchy is {}x{}, network built for {}x{}", s.n_rows(), s.n_bottom(), d.n_rows, d.n_bottom),
            ));
        }
        if bundle.n_bottom != d.n_bottom
            || bundle.hist_channels != d.hist_channels
            || bundle.future_channels != d.future_channels
            || bundle.static_features != d.static_features
            || bundle.horizon != self.config.horizon
        {
            return Err(Error::shape(
                "network",
                format!(
                    "bundle (b={}, hist={}, fut={}, static={}, h={}) vs network {:?}, h={}",
                    bundle.n_bottom,
                    bundle.hist_channels,
                    bundle.future_channels,
                    bundle.static_features,
                    bundle.horizon,
                    d,
                    self.config.horizon
                ),
            ));
        }
        let max_d = *self.config.dilations.iter().max().unwrap_or(&1);
        if bundle.context < max_d * (KERNEL_SIZE - 1) + 1 {
            return Err(Error::InvalidArgument(format!(
                "history of {} steps is shorter than the largest dilation ({}) needs",
                bundle.context, max_d
            )));
        }
        if bundle.context < self.config.receptive_field() {
            log::warn!(
                "history of {} steps is shorter than the receptive field of {}",
                bundle.context,
                self.config.receptive_field()
            );
        }
        Ok(())
    }

    /// Per-row normalisation scales: mean absolute target over the history.
    pub fn row_scales(bundle: &FeatureBundle, s: &AggregationMatrix) -> Vec<f64> {
        let t = bundle.context;
        (0..s.n_rows())
            .map(|r| {
                let mut acc = 0.0;
                for i in 0..t {
                    let v: f64 = s.members(r).iter().map(|&b| bundle.target_history(b)[i]).sum();
                    acc += v.abs();
                }
                let m = acc / t as f64;
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// Last-step convolution encodings for every hierarchy row, `[N, C]`.
    pub fn encode_history(&self, tape: &Tape, bundle: &FeatureBundle, s: &AggregationMatrix, bound: &BoundParams) -> Result<Tensor> {
        self.check_inputs(bundle, s)?;
        self.encode_unchecked(tape, bundle, s, &Self::row_scales(bundle, s), &bound.tensors)
    }

    /// Historical inputs for every hierarchy row, `[N, F_h, T]`: the target
    /// channel is aggregated and normalised, other channels are copied from
    /// the member series with the smallest id, so the choice does not depend
    /// on column order.
    fn expand_history(bundle: &FeatureBundle, s: &AggregationMatrix, scales: &[f64]) -> Vec<f64> {
        let (n, fh, t) = (s.n_rows(), bundle.hist_channels, bundle.context);
        let mut hist = vec![0.0; n * fh * t];
        for r in 0..n {
            let members = s.members(r);
            for ch in 0..fh {
                let dst = &mut hist[(r * fh + ch) * t..(r * fh + ch + 1) * t];
                if ch == bundle.target_channel {
                    for &b in members {
                        for (d, v) in dst.iter_mut().zip(bundle.target_history(b)) {
                            *d += v;
                        }
                    }
                    dst.iter_mut().for_each(|v| *v /= scales[r]);
                } else {
                    let src = (representative(s, r) * fh + ch) * t;
                    dst.copy_from_slice(&bundle.historical[src..src + t]);
                }
            }
        }
        hist
    }

    /// Convolution stack over `[N, F_h, T]`, returning `[N, C, T]`.
    fn conv_stack(&self, x: Tensor, p: &[Tensor]) -> Result<Tensor> {
        let c = self.config.conv_channels;
        let mut x = x;
        for (l, &d) in self.config.dilations.iter().enumerate() {
            let (w, b) = (&p[2 * l], &p[2 * l + 1]);
            x = x.conv1d_dilated(w, d)?.add(&b.reshape(&[c, 1])?)?.relu();
        }
        Ok(x)
    }

    fn encode_unchecked(&self, tape: &Tape, bundle: &FeatureBundle, s: &AggregationMatrix, scales: &[f64], p: &[Tensor]) -> Result<Tensor> {
        let (n, t) = (s.n_rows(), bundle.context);
        let x = tape.constant(&[n, bundle.hist_channels, t], Self::expand_history(bundle, s, scales))?;
        let c = self.config.conv_channels;
        self.conv_stack(x, p)?.narrow(2, t - 1, 1)?.reshape(&[n, c])
    }

    /// Residual cross-series MLP: `[N, C]` encodings to `[N_b, C]` contexts.
    pub fn cross_series(&self, encodings: &Tensor, bound: &BoundParams) -> Result<Tensor> {
        let nl = 2 * self.config.dilations.len();
        self.cross_unchecked(encodings, &bound.tensors[nl..])
    }

    fn cross_unchecked(&self, enc: &Tensor, p: &[Tensor]) -> Result<Tensor> {
        let (n, nb, c) = (self.dims.n_rows, self.dims.n_bottom, self.config.conv_channels);
        if enc.shape() != [n, c] {
            return Err(Error::shape("cross_series", format!("encodings {:?}, expected [{}, {}]", enc.shape(), n, c)));
        }
        let residual = enc.narrow(0, n - nb, nb)?;
        if self.config.cross_series_hidden == 0 {
            return Ok(residual);
        }
        let flat = enc.reshape(&[1, n * c])?;
        let hidden = linear(&flat, &p[0], &p[1])?.relu();
        let mixed = linear(&hidden, &p[2], &p[3])?.reshape(&[nb, c])?;
        mixed.add(&residual)
    }

    /// Full forward pass to factor model parameters in target units.
    pub fn forward(&self, tape: &Tape, bundle: &FeatureBundle, s: &AggregationMatrix, bound: &BoundParams) -> Result<FactorParams> {
        self.check_inputs(bundle, s)?;
        let cfg = &self.config;
        let (nb, nh, nk) = (self.dims.n_bottom, cfg.horizon, cfg.n_factors);
        let ff = bundle.future_channels;
        let scales = Self::row_scales(bundle, s);
        let bottom_scales = &scales[s.n_rows() - nb..];
        let mut cur = Cursor {
            tensors: &bound.tensors,
            pos: 2 * cfg.dilations.len(),
        };

        let enc = self.encode_unchecked(tape, bundle, s, &scales, &bound.tensors)?;
        let cross_n = if cfg.cross_series_hidden > 0 { 4 } else { 0 };
        let h_hist = self.cross_unchecked(&enc, &bound.tensors[cur.pos..cur.pos + cross_n])?;
        cur.pos += cross_n;

        let x_static = tape.constant(&[nb, bundle.static_features], bundle.static_values.clone())?;
        let h_static = linear(&x_static, cur.next(), cur.next())?.relu();

        let mut fut = bundle.future.clone();
        for b in 0..nb {
            for ch in (0..ff).filter(|&ch| bundle.future_in_target_units[ch]) {
                fut[(b * ff + ch) * nh..(b * ff + ch + 1) * nh].iter_mut().for_each(|v| *v /= bottom_scales[b]);
            }
        }
        let x_future = tape.constant(&[nb, ff, nh], fut)?;
        let (fw, fb) = (cur.next(), cur.next());
        let h_future = if ff > 0 {
            linear(&x_future.reshape(&[nb, ff * nh])?, fw, fb)?.relu()
        } else {
            tape.zeros(&[nb, cfg.future_dim])
        };

        let ctx = Tensor::concat(&[&h_hist, &h_static, &h_future], 1)?;
        let c_ag = linear(&ctx, cur.next(), cur.next())?.relu();
        let c_sp = linear(&ctx, cur.next(), cur.next())?.relu().reshape(&[nb, nh, cfg.horizon_specific_dim])?;

        let c_ag_h = c_ag
            .reshape(&[nb, 1, cfg.horizon_agnostic_dim])?
            .add(&tape.zeros(&[nb, nh, cfg.horizon_agnostic_dim]))?;
        let x_f_h = x_future.permute(&[0, 2, 1])?;
        let head_in = Tensor::concat(&[&c_sp, &c_ag_h, &x_f_h], 2)?;
        let out = linear(&head_in, cur.next(), cur.next())?;

        let scale = tape.constant(&[nb, 1], bottom_scales.to_vec())?;
        let mu = out.narrow(2, 0, 1)?.reshape(&[nb, nh])?.mul(&scale)?;
        let sigma = out
            .narrow(2, 1, 1)?
            .reshape(&[nb, nh])?
            .softplus()
            .add_scalar(SIGMA_FLOOR)
            .mul(&scale)?;
        let loadings = out
            .narrow(2, 2, nk)?
            .permute(&[0, 2, 1])?
            .mul(&scale.reshape(&[nb, 1, 1])?)?;
        FactorParams::new(mu, sigma, loadings)
    }

    /// Forward pass with frozen parameters, on a fresh tape.
    pub fn predict(&self, bundle: &FeatureBundle, s: &AggregationMatrix) -> Result<(Tape, FactorParams)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        let fp = self.forward(&tape, bundle, s, &bound)?;
        Ok((tape, fp))
    }
}
