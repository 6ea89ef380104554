//! Run configuration: one versioned JSON document describing an experiment.

use crate::PipelineError;
use riskydiff_core::dataset::{DomainScope, StandardSpecParams};
use riskydiff_core::diffusion::BetaSchedule;
use riskydiff_core::models::{
    ClassifierArch, ClassifierConfig, DenoiserConfig, EmbedderConfig, ErrorPredictorConfig,
};
use riskydiff_core::riskygen::GuidanceConfig;
use riskydiff_core::seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta: BetaSchedule,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta: BetaSchedule::default(),
            steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationOptions {
    /// Samples generated for every category.
    pub per_category: usize,
    /// The classifier the sampler attacks.
    pub target: ClassifierArch,
    /// Fraction of the validation split (stratified by label) used for the
    /// category statistics and the error predictor.
    pub val_fraction: f64,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            per_category: 50,
            target: ClassifierArch::Wide,
            val_fraction: 1.0,
        }
    }
}

/// Which split supplies the error samples for the Fréchet reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSplit {
    Val,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub reference_split: ReferenceSplit,
    /// Domains the conformity oracle's mixture covers.
    pub oracle_scope: DomainScope,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            reference_split: ReferenceSplit::Val,
            oracle_scope: DomainScope::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainOptions {
    pub enabled: bool,
    /// One from-scratch retraining per seed.
    pub seeds: Vec<u64>,
    /// Also run the true-mixture and mislabeled control arms.
    pub controls: bool,
    /// Architecture to retrain; defaults to the generation target.
    pub arch: Option<ClassifierArch>,
    /// Training settings; defaults to the baseline classifier config.
    pub classifier: Option<ClassifierConfig>,
}

impl Default for RetrainOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            seeds: vec![0, 1, 2],
            controls: true,
            arch: None,
            classifier: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; every random draw derives from it.
    pub seed: u64,
    #[serde(default)]
    pub dataset: StandardSpecParams,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub error_predictor: ErrorPredictorConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub generation: GenerationOptions,
    #[serde(default)]
    pub evaluation: EvalOptions,
    #[serde(default)]
    pub retrain: RetrainOptions,
    /// Where the run directory lives. Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            dataset: StandardSpecParams::default(),
            schedule: ScheduleConfig::default(),
            embedder: EmbedderConfig::default(),
            denoiser: DenoiserConfig::default(),
            classifier: ClassifierConfig::default(),
            error_predictor: ErrorPredictorConfig::default(),
            guidance: GuidanceConfig::default(),
            generation: GenerationOptions::default(),
            evaluation: EvalOptions::default(),
            retrain: RetrainOptions::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.schedule.steps == 0 {
            return bad("schedule.steps must be >= 1".into());
        }
        let f = self.generation.val_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("generation.val_fraction must lie in (0, 1], got {f}"));
        }
        if self.generation.per_category == 0 {
            return bad("generation.per_category must be >= 1".into());
        }
        if self.retrain.enabled && self.retrain.seeds.is_empty() {
            return bad("retrain.seeds must not be empty".into());
        }
        self.guidance
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical JSON without the output directory.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_value(c).expect("config serializes")
    }

    /// Identifies the run: hash of [`RunConfig::snapshot`].
    pub fn hash(&self) -> String {
        seed::hash_hex(self.snapshot().to_string().as_bytes())
    }

    pub fn retrain_arch(&self) -> ClassifierArch {
        self.retrain.arch.unwrap_or(self.generation.target)
    }

    pub fn retrain_classifier(&self) -> ClassifierConfig {
        self.retrain
            .classifier
            .clone()
            .unwrap_or_else(|| self.classifier.clone())
    }
}
