//! Feature-map aggregation, beta-VAE training and disentanglement scoring.
//!
//! The pipeline runs in four stages, each backed by one module:
//!
//! 1. [`synthdata`] / [`feature_store`]: labelled feature maps in the `.dfm` format.
//! 2. [`aggregation`]: RMAC (or global pooling) into unit-norm vectors.
//! 3. [`vae`] + [`training`]: a fully-connected beta-VAE with batch norm,
//!    trained with Adam under a cosine-annealed KL weight.
//! 4. [`metrics`]: FactorVAE, MIG, SAP, DCI and IRS on the encoder means.
//!
//! [`pipeline`] wires the stages together behind a single [`pipeline::RunConfig`].

pub mod aggregation;
pub mod feature_store;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod synthdata;
pub mod training;
pub mod vae;

pub use aggregation::{AggregationError, AggregationMethod, RmacConfig};
pub use feature_store::{DfmDataset, FactorTable, StoreError};
pub use metrics::{MetricConfig, MetricError, MetricReport, RepresentationSet};
pub use synthdata::{FactorSpec, SynthError};
pub use training::{BetaSchedule, TrainConfig, TrainError};
pub use vae::{VaeConfig, VaeError, VaeParams};
