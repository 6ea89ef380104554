//! Trainable models: target classifiers, the joint image/category embedder,
//! the conditional noise predictor, the error predictor and the decoder.
//!
//! All reference networks are small MLPs trained single-threaded with Adam.
//! Parameters are rounded to `f32` at the end of training so 32-bit
//! checkpoints reload bit-exactly.

pub mod checkpoint;
mod classifier;
mod decoder;
mod denoiser;
mod embedder;
mod error_predictor;

pub use classifier::{
    accuracy, compute_model_errors, cross_entropy, train_classifier, ClassifierArch, ClassifierConfig,
    TargetClassifier,
};
pub use decoder::{Decoder, IdentityDecoder};
pub use denoiser::{denoising_loss, train_denoiser, DenoiserConfig, NoisePredictor};
pub use embedder::{train_embedder, EmbedderConfig, JointEmbedder};
pub use error_predictor::{fit_error_predictor, ErrorPredictor, ErrorPredictorConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("need at least two categories, found {0}")]
    SingleCategory(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite loss while training {model} at step {step}")]
    NonFiniteLoss { model: &'static str, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Hash of a serializable training config, recorded in checkpoints.
pub fn config_hash<T: serde::Serialize>(cfg: &T) -> String {
    crate::seed::hash_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

/// Shuffled minibatch index lists for one epoch.
pub(crate) fn minibatches<R: rand::Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}
