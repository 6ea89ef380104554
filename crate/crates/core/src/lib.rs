//! Conformity-constrained risky-sample generation with gradient-guided DDIM
//! sampling, on a synthetic multi-domain classification task whose ground
//! truth is known exactly.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffusion`]: schedules, forward noising and the DDIM step.
//! - [`nn`]: tiny MLPs with hand-written gradients, Adam.
//! - [`models`]: classifier, joint embedder, noise predictor, error predictor.
//! - [`dataset`]: synthetic data, splits, the Bayes oracle, file format.
//! - [`riskygen`]: category statistics, embedding screening, the guidance
//!   score, guided noise and the generation loop.
//! - [`evaluation`]: error rate, Fréchet distance, conformity, transfer.

pub mod container;
pub mod dataset;
pub mod diffusion;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod riskygen;
pub mod seed;
