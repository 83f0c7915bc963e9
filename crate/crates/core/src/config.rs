//! Flat `key = value` run configuration.
//!
//! Keys follow the usual hyperparameter table names in snake case, e.g.
//!
//! ```text
//! # small configuration
//! activation_function = relu
//! temporal_convolution_channel_size = 10
//! factor_model_components = 10
//! sgd_max_steps = 2000
//! early_stop_patience_steps = 5
//! learning_rate = 5e-3
//! objective = crps
//! ```
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{FeatureConfig, Frequency};
use crate::error::{Error, Result};
use crate::loss::Objective;
use crate::network::NetworkConfig;
use crate::scoring::EnergyNorm;
use crate::training::TrainConfig;

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    /// Kept for the echo; only the value 1 is supported.
    pub sgd_batch_size: usize,
    /// Informational: the number of series seen per step.
    pub sgd_effective_batch_size: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
            sgd_batch_size: 1,
            sgd_effective_batch_size: None,
        }
    }
}

/// All accepted keys, in echo order.
pub const KEYS: &[&str] = &[
    "activation_function",
    "static_encoder_dimension",
    "temporal_convolution_channel_size",
    "future_encoder_dimension",
    "horizon_specific_decoder_dimensions",
    "horizon_agnostic_decoder_dimensions",
    "factor_model_components",
    "cross_series_mlp_hidden_size",
    "sgd_batch_size",
    "sgd_effective_batch_size",
    "sgd_max_steps",
    "early_stop_patience_steps",
    "learning_rate",
    "dilations",
    "horizon",
    "objective",
    "n_mc_samples",
    "eval_every",
    "eval_samples",
    "eval_seed",
    "seed",
    "beta",
    "energy_norm",
    "context_length",
    "season_length",
    "frequency",
    "anchor",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{}: cannot parse '{}'", key, value)))
}

/// Accepts plain integers and integral floats such as `2e3`.
fn parse_count(key: &str, value: &str) -> Result<usize> {
    if let Ok(v) = value.parse::<usize>() {
        return Ok(v);
    }
    let f: f64 = parse_num(key, value)?;
    if f >= 0.0 && f.fract() == 0.0 && f < 1e15 {
        Ok(f as usize)
    } else {
        Err(Error::Config(format!("{}: expected a non-negative integer, got '{}'", key, value)))
    }
}

fn parse_optional_count(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "" | "none" | "auto" => Ok(None),
        v => parse_count(key, v).map(Some),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{}'", i + 1, line)))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {}", i + 1, m)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    /// Set one key; used by the parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.network;
        let t = &mut self.train;
        let f = &mut self.features;
        match key {
            "activation_function" => {
                if !value.eq_ignore_ascii_case("relu") {
                    return Err(Error::Config(format!("activation_function: only relu is supported, got '{}'", value)));
                }
            }
            "static_encoder_dimension" => n.static_dim = parse_count(key, value)?,
            "temporal_convolution_channel_size" => n.conv_channels = parse_count(key, value)?,
            "future_encoder_dimension" => n.future_dim = parse_count(key, value)?,
            "horizon_specific_decoder_dimensions" => n.horizon_specific_dim = parse_count(key, value)?,
            "horizon_agnostic_decoder_dimensions" => n.horizon_agnostic_dim = parse_count(key, value)?,
            "factor_model_components" => n.n_factors = parse_count(key, value)?,
            "cross_series_mlp_hidden_size" => n.cross_series_hidden = parse_count(key, value)?,
            "sgd_batch_size" => self.sgd_batch_size = parse_count(key, value)?,
            "sgd_effective_batch_size" => self.sgd_effective_batch_size = parse_optional_count(key, value)?,
            "sgd_max_steps" => t.max_steps = parse_count(key, value)?,
            "early_stop_patience_steps" => t.patience = parse_num(key, value)?,
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "dilations" => {
                n.dilations = value
                    .split(',')
                    .map(|d| parse_count(key, d.trim()))
                    .collect::<Result<Vec<_>>>()?
            }
            "horizon" => n.horizon = parse_count(key, value)?,
            "objective" => t.objective = Objective::parse(value)?,
            "n_mc_samples" => t.n_mc_samples = parse_count(key, value)?,
            "eval_every" => t.eval_every = parse_count(key, value)?,
            "eval_samples" => t.eval_samples = parse_count(key, value)?,
            "eval_seed" => t.eval_seed = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "beta" => t.score.beta = parse_num(key, value)?,
            "energy_norm" => {
                t.score.energy_norm = match value {
                    "joint" => EnergyNorm::Joint,
                    "per_horizon" => EnergyNorm::PerHorizon,
                    v => return Err(Error::Config(format!("energy_norm: expected joint or per_horizon, got '{}'", v))),
                }
            }
            "context_length" => f.context_length = parse_count(key, value)?,
            "season_length" => f.season_length = parse_optional_count(key, value)?,
            "frequency" => {
                f.frequency = match value {
                    "" | "none" => None,
                    v => Some(Frequency::parse(v).map_err(|e| Error::Config(format!("frequency: {}", e)))?),
                }
            }
            "anchor" => f.anchor = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{}'", other))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sgd_batch_size != 1 {
            return Err(Error::Config(format!("sgd_batch_size: only 1 is supported, got {}", self.sgd_batch_size)));
        }
        if self.features.context_length == 0 {
            return Err(Error::Config("context_length must be at least 1".into()));
        }
        if self.features.season_length == Some(0) {
            return Err(Error::Config("season_length must be at least 1".into()));
        }
        self.network.validate()?;
        self.train.validate()
    }

    /// Resolved configuration in the same `key = value` format.
    pub fn to_key_value(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let f = &self.features;
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let values: Vec<String> = vec![
            "relu".into(),
            n.static_dim.to_string(),
            n.conv_channels.to_string(),
            n.future_dim.to_string(),
            n.horizon_specific_dim.to_string(),
            n.horizon_agnostic_dim.to_string(),
            n.n_factors.to_string(),
            n.cross_series_hidden.to_string(),
            self.sgd_batch_size.to_string(),
            opt(self.sgd_effective_batch_size),
            t.max_steps.to_string(),
            t.patience.to_string(),
            format!("{}", t.learning_rate),
            n.dilations.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
            n.horizon.to_string(),
            t.objective.to_string(),
            t.n_mc_samples.to_string(),
            t.eval_every.to_string(),
            t.eval_samples.to_string(),
            t.eval_seed.to_string(),
            t.seed.to_string(),
            format!("{}", t.score.beta),
            match t.score.energy_norm {
                EnergyNorm::Joint => "joint".into(),
                EnergyNorm::PerHorizon => "per_horizon".into(),
            },
            f.context_length.to_string(),
            opt(f.season_length),
            f.frequency.map_or("none".to_string(), |q| q.to_string()),
            f.anchor.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{} = {}", k, v);
        }
        out
    }
}
