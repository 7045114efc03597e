//! Fully-connected beta-VAE with batch normalization and hand-written gradients.
//!
//! Encoder: `FC -> BN -> ReLU` per hidden width, then two linear heads for the
//! posterior mean and log-variance. Decoder mirrors it and ends in a linear layer
//! producing the reconstruction mean. Everything runs in `f64`.
//!
//! Train-mode forward passes use batch statistics and are pure; the caller commits
//! the batch statistics into the running estimates with
//! [`VaeParams::update_running_stats`].

mod backward;
mod forward;
mod gradcheck;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::backward;
pub use forward::{
    decode, encode, forward_train, loss, reparameterize, reparameterize_with_noise, standard_normal_noise,
    DecoderCache, EncoderCache, ForwardPass, HiddenCache, LatentSample, LossValue, PosteriorParams,
};
pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use params::{init_params, BatchNorm, Dense, DenseGrad, Gradients, HiddenGrad, HiddenLayer, VaeParams};

/// Bounds applied to the log-variance before it is exponentiated.
pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 30.0;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid vae config: {0}")]
    InvalidConfig(String),
    #[error("train-mode batch norm needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("{what}: expected {expected} columns, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("backward needs a train-mode forward pass")]
    StaleCache,
    #[error("forward cache does not belong to this input ({0})")]
    CacheMismatch(&'static str),
    #[error("finite difference step must be positive and finite, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, VaeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; requires at least two rows.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 512,
            encoder_hidden: vec![256, 128, 64],
            decoder_hidden: vec![64, 128, 256],
            latent_dim: 18,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl VaeConfig {
    /// Default widths with a different input dimension and latent count.
    pub fn with_dims(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(VaeError::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(VaeError::InvalidConfig("latent_dim must be >= 1".into()));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).any(|&h| h == 0) {
            return Err(VaeError::InvalidConfig("hidden sizes must be positive".into()));
        }
        if !(self.bn_epsilon > 0.0 && self.bn_epsilon.is_finite()) {
            return Err(VaeError::InvalidConfig("bn_epsilon must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(VaeError::InvalidConfig("bn_momentum must lie in (0, 1)".into()));
        }
        Ok(())
    }
}
