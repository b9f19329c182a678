//! Generative saliency prediction with a trainable energy-based latent prior.
//!
//! The model predicts a saliency map from an image through a conditional
//! generator driven by a low-dimensional latent vector whose prior is a
//! learned exponential tilting of a Gaussian. Training is MCMC-based maximum
//! likelihood: latent samples come from short-run Langevin chains over the
//! prior and posterior, in three learner variants (plain, adversarial, and
//! amortized warm-start). At test time, repeated prior sampling yields a mean
//! prediction and a per-pixel variance map that serves as uncertainty.

pub mod adam;
pub mod checkpoint;
pub mod nn;
pub mod oracles;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod testkit;

pub mod ebm_prior;
pub mod generator;

pub mod adversarial;
pub mod amortized;

pub mod inference;
pub mod metrics;
pub mod pnm;
pub mod synthdata;
pub mod training;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {context}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { context: String, step: Option<usize> },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
