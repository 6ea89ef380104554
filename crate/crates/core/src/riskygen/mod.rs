//! Risky-sample generation: category statistics, embedding screening, the
//! guidance score, guided noise prediction and the sampling loop.
//!
//! The sampler draws an image-embedding condition near the validation
//! embeddings of a category, keeps it only if the error predictor expects
//! the target model to fail there, and then runs deterministic DDIM with the
//! predicted noise nudged along the normalized gradient of
//! `Ŝ = CE(f(x̂), y) + λ·h(x̂)·y_text`.

mod dump;
mod generate;
mod guidance;
mod score;
mod screening;
mod stats;

pub use dump::{read_samples, write_sample_index, write_samples, SampleDump};
pub use generate::{
    generate, sample_conditional, ConditionalSamples, GeneratedSample, GenerationModels, StepTrace,
};
pub use guidance::{guided_noise, Conditions, GuidedNoise, NoiseModel};
pub use score::{guidance_score, GuidanceScore, RiskScore, ScoreOutput};
pub use screening::{draw_condition, screen_embedding, ScreenOutcome};
pub use stats::{estimate_category_stats, CategoryStats};

use crate::container::ContainerError;
use crate::diffusion::DiffusionError;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("no samples of category {0}")]
    NoSamples(usize),
    #[error("embeddings have {embeddings} rows but {labels} labels")]
    LengthMismatch { embeddings: usize, labels: usize },
    #[error("invalid guidance config: {0}")]
    InvalidConfig(String),
    #[error("non-finite classifier logits")]
    NonFiniteLogits,
    #[error("non-finite guidance gradient at step {step} for sample {sample}")]
    NonFiniteGradient { step: usize, sample: usize },
    #[error("non-finite diffusion state at step {step}: {source}")]
    NonFiniteState {
        step: usize,
        #[source]
        source: DiffusionError,
    },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("sample dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Gradient scale.
    pub s: f64,
    /// Conformity coefficient.
    pub lambda: f64,
    /// Draw conditions through the error predictor. When off, each sample
    /// uses the first draw of its condition stream.
    pub screening: bool,
    pub max_screen_attempts: usize,
    pub grad_norm_floor: f64,
    /// Classifier-free guidance weight; 1 uses the conditional prediction only.
    pub cfg_weight: f64,
    /// Treat the noise prediction as a constant when differentiating `Ŝ`.
    pub stop_grad_through_denoiser: bool,
    /// Keep per-step score, gradient norm and state for every sample.
    pub record_trace: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s: 10.0,
            lambda: 1e-4,
            screening: true,
            max_screen_attempts: 100,
            grad_norm_floor: 1e-12,
            cfg_weight: 1.0,
            stop_grad_through_denoiser: false,
            record_trace: false,
        }
    }
}

impl GuidanceConfig {
    /// Stronger guidance for tasks with few categories.
    pub fn few_categories() -> Self {
        Self {
            s: 20.0,
            ..Self::default()
        }
    }

    /// No screening and no gradient guidance: plain conditional sampling.
    pub fn unguided() -> Self {
        Self {
            s: 0.0,
            lambda: 0.0,
            screening: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: &str| Err(GenerateError::InvalidConfig(m.to_string()));
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return bad("s must be finite and >= 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.max_screen_attempts == 0 {
            return bad("max_screen_attempts must be >= 1");
        }
        if !(self.grad_norm_floor > 0.0) {
            return bad("grad_norm_floor must be > 0");
        }
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return bad("cfg_weight must be finite and >= 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let cfg = GuidanceConfig::default();
        assert_eq!((cfg.s, cfg.lambda, cfg.max_screen_attempts), (10.0, 1e-4, 100));
        cfg.validate().unwrap();
        assert_eq!(GuidanceConfig::few_categories().s, 20.0);
        for broken in [
            GuidanceConfig { s: -1.0, ..cfg.clone() },
            GuidanceConfig { lambda: f64::NAN, ..cfg.clone() },
            GuidanceConfig { max_screen_attempts: 0, ..cfg.clone() },
            GuidanceConfig { grad_norm_floor: 0.0, ..cfg.clone() },
        ] {
            assert!(matches!(broken.validate(), Err(GenerateError::InvalidConfig(_))));
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<GuidanceConfig>(r#"{"s": 1, "scale": 2}"#);
        assert!(err.is_err());
        let ok: GuidanceConfig = serde_json::from_str(r#"{"s": 1}"#).unwrap();
        assert_eq!(ok.lambda, 1e-4);
    }
}
