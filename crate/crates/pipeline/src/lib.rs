//! Experiment orchestration for risky-sample generation.
//!
//! A run is described by one [`RunConfig`]. [`run_experiment`] executes the
//! stages in order (data, training, generation, evaluation, retraining) and
//! caches each stage's output under a key derived from the config fields it
//! depends on, so sweeps and ablations reuse trained models.
//!
//! Seed scheme: every stage seed is `derive(master, <stage tag>)`; see
//! [`stages`] for the tags.

pub mod config;
pub mod plot;
pub mod retrain;
pub mod stages;
pub mod store;
pub mod sweep;

pub use config::{RunConfig, SCHEMA_VERSION};
pub use retrain::{augment_and_retrain, RetrainTable};
pub use stages::{arm_label, run_experiment, Pipeline, StageReport, Trained};
pub use store::{RunRecord, Store};
pub use sweep::{ablate, sweep, AblationReport, SweepAxis, SweepTable};

use thiserror::Error;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
    #[error("unknown sweep axis {0:?} (expected s, lambda or val_fraction)")]
    UnknownAxis(String),
    #[error("sweep values must be non-empty and sorted ascending")]
    UnsortedValues,
    #[error("plot: {0}")]
    Plot(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl PipelineError {
    /// Wraps a failure of `stage`.
    pub fn stage<E: Into<BoxError>>(stage: &'static str) -> impl FnOnce(E) -> Self {
        move |e| PipelineError::Stage {
            stage,
            source: e.into(),
        }
    }

    /// The failing stage, if any.
    pub fn stage_name(&self) -> Option<&'static str> {
        match self {
            PipelineError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
