//! End-to-end commands: synth, aggregate, train, eval and the full pipeline.
//!
//! Every artifact carries the resolved [`RunConfig`] it was produced with. JSON
//! files embed it under `"config"`; `.dfm` files get a `<name>.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate_dataset, fit_whitening_on_maps, AggregationError, AggregationMethod, RmacConfig};
use crate::feature_store::{read_dfm, sample_with_replacement, write_dfm, DfmDataset, StoreError};
use crate::metrics::{evaluate, represent, Metric, MetricConfig, MetricError, MetricReport};
use crate::seed::{stage_seed, Stage};
use crate::synthdata::{gen_factor_grid, gen_feature_maps, FactorSpec, SynthError, DEFAULT_GRID_CAP};
use crate::training::{
    initial_params, load_checkpoint, save_checkpoint, train_params, dataset_matrix, BetaSchedule, EpochRecord,
    TrainConfig, TrainError,
};
use crate::vae::{VaeConfig, VaeError, VaeParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl PipelineError {
    /// Short stable identifier for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::Json { .. } => "json",
            PipelineError::Store(_) => "feature_store",
            PipelineError::Aggregation(_) => "aggregation",
            PipelineError::Synth(_) => "synthdata",
            PipelineError::Train(_) => "training",
            PipelineError::Vae(_) => "vae",
            PipelineError::Metric(_) => "metrics",
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Every knob of a run in one flat record. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub cardinalities: Vec<u32>,
    pub map_channels: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub n_samples: usize,

    pub method: AggregationMethod,
    pub whitening_sample: usize,

    pub latents: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,

    pub epochs: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub anneal_start: usize,
    /// Defaults to `epochs - 1`.
    pub anneal_end: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,

    pub metrics: Vec<Metric>,
    pub mig_bins: usize,
    pub factorvae_train_votes: usize,
    pub factorvae_eval_votes: usize,
    pub factorvae_probe_size: usize,
    pub dci_train_fraction: f64,
    pub dci_l1: f64,
    pub dci_iterations: usize,
    pub irs_zero_guard: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vae = VaeConfig::default();
        let train = TrainConfig::default();
        let metrics = MetricConfig::default();
        let spec = FactorSpec::default();
        Self {
            seed: 0,
            cardinalities: spec.cardinalities,
            map_channels: spec.map_channels,
            map_h: spec.map_h,
            map_w: spec.map_w,
            n_samples: 10_000,
            method: AggregationMethod::Rmac,
            whitening_sample: 10_000,
            latents: vae.latent_dim,
            encoder_hidden: vae.encoder_hidden,
            decoder_hidden: vae.decoder_hidden,
            bn_epsilon: vae.bn_epsilon,
            bn_momentum: vae.bn_momentum,
            epochs: train.schedule.n_epochs,
            beta_start: train.schedule.beta_start,
            beta_end: train.schedule.beta_end,
            anneal_start: train.schedule.t_start,
            anneal_end: None,
            batch_size: train.batch_size,
            lr: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_epsilon: train.adam_epsilon,
            metrics: Metric::ALL.to_vec(),
            mig_bins: metrics.mig_bins,
            factorvae_train_votes: metrics.factorvae_train_votes,
            factorvae_eval_votes: metrics.factorvae_eval_votes,
            factorvae_probe_size: metrics.factorvae_probe_size,
            dci_train_fraction: metrics.dci_train_fraction,
            dci_l1: metrics.dci_l1,
            dci_iterations: metrics.dci_iterations,
            irs_zero_guard: metrics.irs_zero_guard,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|source| PipelineError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Fills derived defaults and checks every section.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        if out.epochs == 0 {
            return Err(PipelineError::Config("epochs must be positive".into()));
        }
        out.anneal_end.get_or_insert(out.epochs - 1);
        if out.n_samples == 0 {
            return Err(PipelineError::Config("n_samples must be positive".into()));
        }
        if out.metrics.is_empty() {
            return Err(PipelineError::Config("metric list is empty".into()));
        }
        out.factor_spec().validate()?;
        out.train_config().validate()?;
        out.metric_config().validate()?;
        out.vae_config(1).validate()?;
        Ok(out)
    }

    pub fn factor_spec(&self) -> FactorSpec {
        FactorSpec {
            cardinalities: self.cardinalities.clone(),
            map_channels: self.map_channels,
            map_h: self.map_h,
            map_w: self.map_w,
            noise_dims: 0,
            grid_cap: DEFAULT_GRID_CAP,
        }
    }

    pub fn vae_config(&self, input_dim: usize) -> VaeConfig {
        VaeConfig {
            input_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            latent_dim: self.latents,
            bn_epsilon: self.bn_epsilon,
            bn_momentum: self.bn_momentum,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            batch_size: self.batch_size,
            schedule: BetaSchedule {
                beta_start: self.beta_start,
                beta_end: self.beta_end,
                t_start: self.anneal_start,
                t_end: self.anneal_end.unwrap_or(self.epochs.saturating_sub(1)),
                n_epochs: self.epochs,
            },
            seed: self.seed,
        }
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            mig_bins: self.mig_bins,
            factorvae_train_votes: self.factorvae_train_votes,
            factorvae_eval_votes: self.factorvae_eval_votes,
            factorvae_probe_size: self.factorvae_probe_size,
            dci_train_fraction: self.dci_train_fraction,
            dci_l1: self.dci_l1,
            dci_iterations: self.dci_iterations,
            irs_zero_guard: self.irs_zero_guard,
        }
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    config: &'a RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryFile {
    pub history: Vec<EpochRecord>,
    pub seed: u64,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub model: String,
    pub seed: u64,
    pub config: RunConfig,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn write_dfm_with_sidecar(dataset: &DfmDataset, path: &Path, command: &str, config: &RunConfig) -> Result<()> {
    write_dfm(dataset, path)?;
    let sidecar = Sidecar {
        command,
        n: dataset.n,
        c: dataset.c,
        h: dataset.h,
        w: dataset.w,
        config,
    };
    write_json(&sidecar, &sidecar_path(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Labelled synthetic maps: the full factor grid rendered once, then resampled
/// with replacement to `n_samples` rows.
pub fn synth_maps(config: &RunConfig) -> Result<DfmDataset> {
    let config = config.resolved()?;
    let spec = config.factor_spec();
    let grid = gen_factor_grid(&spec)?;
    let maps = gen_feature_maps(&grid, &spec, stage_seed(config.seed, Stage::Synth))?;
    Ok(sample_with_replacement(&maps, config.n_samples, stage_seed(config.seed, Stage::Sample))?)
}

pub fn cmd_synth(config: &RunConfig, output: &Path) -> Result<DfmDataset> {
    let resolved = config.resolved()?;
    let maps = synth_maps(&resolved)?;
    write_dfm_with_sidecar(&maps, output, "synth", &resolved)?;
    Ok(maps)
}

/// Aggregates maps into vectors with `config.method`.
pub fn aggregate(config: &RunConfig, maps: &DfmDataset) -> Result<DfmDataset> {
    let config = config.resolved()?;
    let mut rmac = RmacConfig::default();
    if config.method == AggregationMethod::RmacWhitened {
        rmac.whitening = Some(fit_whitening_on_maps(
            maps,
            &rmac.regions,
            config.whitening_sample,
            stage_seed(config.seed, Stage::Whitening),
        )?);
    }
    Ok(aggregate_dataset(maps, config.method, &rmac)?)
}

pub fn cmd_aggregate(config: &RunConfig, input: &Path, output: &Path) -> Result<DfmDataset> {
    let resolved = config.resolved()?;
    let maps = read_dfm(input)?;
    let vectors = aggregate(&resolved, &maps)?;
    write_dfm_with_sidecar(&vectors, output, "aggregate", &resolved)?;
    Ok(vectors)
}

/// Model shape for a vector dataset under `config`.
pub fn model_config(config: &RunConfig, vectors: &DfmDataset) -> Result<VaeConfig> {
    if vectors.h != 1 || vectors.w != 1 {
        return Err(PipelineError::Config(format!(
            "training expects aggregated vectors (h = w = 1), got {}x{} maps",
            vectors.h, vectors.w
        )));
    }
    let vae = config.vae_config(vectors.c);
    vae.validate()?;
    Ok(vae)
}

/// Randomly initialized and trained parameters plus the epoch history.
pub struct TrainOutcome {
    pub initial: VaeParams,
    pub trained: VaeParams,
    pub history: Vec<EpochRecord>,
}

pub fn train_vectors(config: &RunConfig, vectors: &DfmDataset) -> Result<TrainOutcome> {
    let config = config.resolved()?;
    let vae = model_config(&config, vectors)?;
    let train = config.train_config();
    let initial = initial_params(&vae, &train)?;
    let mut trained = initial.clone();
    let history = train_params(&mut trained, &dataset_matrix(vectors), &train)?;
    Ok(TrainOutcome {
        initial,
        trained,
        history,
    })
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";

/// Trains on `input` and writes `model.ckpt` and `history.json` into `out_dir`.
pub fn cmd_train(config: &RunConfig, input: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let resolved = config.resolved()?;
    let vectors = read_dfm(input)?;
    let outcome = train_vectors(&resolved, &vectors)?;
    ensure_dir(out_dir)?;
    save_checkpoint(&outcome.trained, Some(&resolved.train_config()), out_dir.join(CHECKPOINT_FILE))?;
    let history = HistoryFile {
        history: outcome.history.clone(),
        seed: resolved.seed,
        config: resolved,
    };
    write_json(&history, &out_dir.join(HISTORY_FILE))?;
    Ok(outcome)
}

/// Scores `params` on a labelled vector dataset.
pub fn eval_params(config: &RunConfig, params: &VaeParams, vectors: &DfmDataset) -> Result<MetricReport> {
    let config = config.resolved()?;
    let rep = represent(params, vectors)?;
    Ok(evaluate(
        &rep,
        &config.metrics,
        &config.metric_config(),
        stage_seed(config.seed, Stage::Eval),
    )?)
}

fn report_file(metrics: MetricReport, model: &str, config: &RunConfig) -> ReportFile {
    ReportFile {
        metrics,
        model: model.to_string(),
        seed: config.seed,
        config: config.clone(),
    }
}

pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, input: &Path, output: &Path) -> Result<MetricReport> {
    let resolved = config.resolved()?;
    let params = load_checkpoint(checkpoint)?.params;
    let vectors = read_dfm(input)?;
    let report = eval_params(&resolved, &params, &vectors)?;
    write_json(&report_file(report.clone(), "trained", &resolved), output)?;
    Ok(report)
}

pub const MAPS_FILE: &str = "maps.dfm";
pub const VECTORS_FILE: &str = "vectors.dfm";
pub const REPORT_FILE: &str = "report.json";
pub const BASELINE_REPORT_FILE: &str = "baseline_report.json";

/// Results of a full run.
pub struct PipelineOutcome {
    pub history: Vec<EpochRecord>,
    pub report: MetricReport,
    /// Scores of the untrained, randomly initialized model on the same vectors.
    pub baseline: MetricReport,
}

/// synth -> aggregate -> train -> eval, writing every artifact into `out_dir`.
pub fn cmd_pipeline(config: &RunConfig, out_dir: &Path) -> Result<PipelineOutcome> {
    let resolved = config.resolved()?;
    ensure_dir(out_dir)?;
    let maps = cmd_synth(&resolved, &out_dir.join(MAPS_FILE))?;
    let vectors = aggregate(&resolved, &maps)?;
    write_dfm_with_sidecar(&vectors, &out_dir.join(VECTORS_FILE), "aggregate", &resolved)?;
    let outcome = cmd_train(&resolved, &out_dir.join(VECTORS_FILE), out_dir)?;
    let report = eval_params(&resolved, &outcome.trained, &vectors)?;
    let baseline = eval_params(&resolved, &outcome.initial, &vectors)?;
    write_json(&report_file(report.clone(), "trained", &resolved), &out_dir.join(REPORT_FILE))?;
    write_json(
        &report_file(baseline.clone(), "initial", &resolved),
        &out_dir.join(BASELINE_REPORT_FILE),
    )?;
    Ok(PipelineOutcome {
        history: outcome.history,
        report,
        baseline,
    })
}
