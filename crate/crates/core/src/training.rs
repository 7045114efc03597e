//! Cosine beta annealing, Adam, the epoch loop and checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::DfmDataset;
use crate::seed::{stage_rng, stage_seed, Stage};
use crate::vae::{backward, forward_train, init_params, loss, standard_normal_noise, Gradients, VaeConfig, VaeError, VaeParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid beta schedule: {0}")]
    InvalidSchedule(String),
    #[error("epoch {t} outside 0..{n_epochs}")]
    EpochOutOfRange { t: usize, n_epochs: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training set has {0} rows, need at least 2")]
    EmptyDataset(usize),
    #[error("training rows have {got} values, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("non-finite gradient in tensor {tensor} at index {index}: {value}")]
    NonFiniteGradient { tensor: usize, index: usize, value: f64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_start: usize,
    pub t_end: usize,
    pub n_epochs: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 0.12,
            t_start: 1,
            t_end: 19,
            n_epochs: 20,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_epochs == 0 {
            return Err(TrainError::InvalidSchedule("n_epochs must be positive".into()));
        }
        if !(self.t_start <= self.t_end && self.t_end < self.n_epochs) {
            return Err(TrainError::InvalidSchedule(format!(
                "need t_start <= t_end <= n_epochs - 1, got {} {} {}",
                self.t_start, self.t_end, self.n_epochs
            )));
        }
        if !(self.beta_start.is_finite() && self.beta_end.is_finite() && self.beta_start <= self.beta_end) {
            return Err(TrainError::InvalidSchedule(format!(
                "need finite beta_start <= beta_end, got {} {}",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }

    /// KL weight for epoch `t`: constant `beta_start` before `t_start`, constant
    /// `beta_end` after `t_end`, and a half-cosine ramp in between.
    pub fn beta_at(&self, t: usize) -> Result<f64> {
        self.validate()?;
        if t >= self.n_epochs {
            return Err(TrainError::EpochOutOfRange { t, n_epochs: self.n_epochs });
        }
        if t < self.t_start {
            return Ok(self.beta_start);
        }
        if t >= self.t_end {
            return Ok(self.beta_end);
        }
        let frac = (t - self.t_start) as f64 / (self.t_end - self.t_start) as f64;
        let w = 0.5 * (1.0 - (PI * frac).cos());
        Ok((1.0 - w) * self.beta_start + w * self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub schedule: BetaSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 256,
            schedule: BetaSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        self.schedule.validate()
    }
}

/// First and second moment accumulators, one buffer per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &VaeParams) -> Self {
        let sizes: Vec<usize> = params.trainable().iter().map(|t| t.len()).collect();
        Self::new(&sizes)
    }

    /// One bias-corrected Adam update over parallel lists of parameter and gradient
    /// tensors. Nothing is modified if any gradient is non-finite.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, config: &TrainConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::StateMismatch(format!(
                "{} tensors in state, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(&grads).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(TrainError::StateMismatch(format!("tensor {i} size")));
            }
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient { tensor: i, index, value });
            }
        }

        self.step += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to every trainable tensor of `params`.
pub fn adam_step(params: &mut VaeParams, grads: &Gradients, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    state.update(params.trainable_mut(), grads.tensors(), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub total: f64,
    pub mse: f64,
    pub kld: f64,
}

/// Dataset rows as an `n x d` matrix in `f64`.
pub fn dataset_matrix(dataset: &DfmDataset) -> Array2<f64> {
    let d = dataset.record_len();
    Array2::from_shape_fn((dataset.n, d), |(i, j)| f64::from(dataset.data[i * d + j]))
}

/// Parameters a run with `config.seed` starts from.
pub fn initial_params(vae_config: &VaeConfig, config: &TrainConfig) -> Result<VaeParams> {
    Ok(init_params(vae_config, stage_seed(config.seed, Stage::Init))?)
}

/// Trains a freshly initialized model on the rows of `dataset`.
pub fn train(dataset: &DfmDataset, vae_config: &VaeConfig, config: &TrainConfig) -> Result<(VaeParams, Vec<EpochRecord>)> {
    config.validate()?;
    vae_config.validate()?;
    if dataset.record_len() != vae_config.input_dim {
        return Err(TrainError::DimMismatch {
            expected: vae_config.input_dim,
            got: dataset.record_len(),
        });
    }
    let mut params = initial_params(vae_config, config)?;
    let history = train_params(&mut params, &dataset_matrix(dataset), config)?;
    Ok((params, history))
}

/// Runs the full epoch loop on `params` in place and returns the per-epoch history.
///
/// Each epoch reshuffles the rows; a trailing batch with fewer than two rows is
/// skipped since batch norm needs two.
pub fn train_params(params: &mut VaeParams, x: &Array2<f64>, config: &TrainConfig) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let n = x.nrows();
    if n < 2 {
        return Err(TrainError::EmptyDataset(n));
    }
    if x.ncols() != params.config.input_dim {
        return Err(TrainError::DimMismatch {
            expected: params.config.input_dim,
            got: x.ncols(),
        });
    }
    let latent_dim = params.config.latent_dim;
    let mut rng = stage_rng(config.seed, Stage::Train);
    let mut state = AdamState::for_params(params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.schedule.n_epochs);

    for epoch in 0..config.schedule.n_epochs {
        let beta = config.schedule.beta_at(epoch)?;
        order.shuffle(&mut rng);
        let (mut total, mut mse, mut kld, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let xb = x.select(ndarray::Axis(0), idx);
            let noise = standard_normal_noise(idx.len(), latent_dim, &mut rng);
            let pass = forward_train(params, &xb, noise).map_err(|e| match e {
                VaeError::NonFinite(_) => TrainError::NonFiniteLoss { epoch, batch },
                other => other.into(),
            })?;
            let value = loss(&xb, &pass.reconstruction, &pass.posterior, beta, latent_dim);
            if !value.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            let grads = backward(params, &pass, &xb, beta)?;
            adam_step(params, &grads, &mut state, config).map_err(|e| match e {
                TrainError::NonFiniteGradient { .. } => TrainError::NonFiniteLoss { epoch, batch },
                other => other,
            })?;
            params.update_running_stats(&pass)?;
            let rows = idx.len() as f64;
            total += value.total * rows;
            mse += value.mse * rows;
            kld += value.kld * rows;
            seen += idx.len();
        }
        let seen = seen as f64;
        history.push(EpochRecord {
            epoch,
            beta,
            total: total / seen,
            mse: mse / seen,
            kld: kld / seen,
        });
    }
    Ok(history)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FVCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    vae_config: VaeConfig,
    train_config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: VaeParams,
    pub train_config: Option<TrainConfig>,
}

/// Serialized checkpoint: magic, `u32` format version, `u32` header length, JSON
/// header, then every tensor as little-endian `f64` in header order.
pub fn encode_checkpoint(params: &VaeParams, train_config: Option<&TrainConfig>) -> Vec<u8> {
    let tensors = params.named_tensors();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        vae_config: params.config.clone(),
        train_config: train_config.cloned(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let values: usize = tensors.iter().map(|t| t.2.len()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 8 * values);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| TrainError::Corrupt(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Corrupt(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| TrainError::Corrupt(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(corrupt("header version disagrees with preamble"));
    }

    let mut params = init_params(&header.vae_config, 0)?;
    let expected: Vec<TensorEntry> = params
        .named_tensors()
        .into_iter()
        .map(|(name, shape, _)| TensorEntry { name, shape })
        .collect();
    if expected != header.tensors {
        return Err(TrainError::ConfigMismatch("tensor manifest does not match the declared vae config".into()));
    }
    let mut blob = &bytes[12 + header_len..];
    for tensor in params.tensors_mut() {
        let need = tensor.len() * 8;
        if blob.len() < need {
            return Err(corrupt("truncated parameter blob"));
        }
        for (dst, chunk) in tensor.iter_mut().zip(blob[..need].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        blob = &blob[need..];
    }
    if !blob.is_empty() {
        return Err(corrupt("trailing bytes after parameter blob"));
    }
    Ok(Checkpoint {
        params,
        train_config: header.train_config,
    })
}

pub fn save_checkpoint(params: &VaeParams, train_config: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_checkpoint(params, train_config))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and insists its architecture equals `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &VaeConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.params.config != *expected {
        return Err(TrainError::ConfigMismatch(format!(
            "file holds {:?}, caller expects {:?}",
            ckpt.params.config, expected
        )));
    }
    Ok(ckpt)
}
