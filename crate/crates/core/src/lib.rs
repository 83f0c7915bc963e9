//! Coherent probabilistic forecasting for hierarchical time series.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod factor;
pub mod hierarchy;
pub mod loss;
pub mod network;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
