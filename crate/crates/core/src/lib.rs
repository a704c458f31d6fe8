//! Class-imbalance oversampling by evolving a Gaussian-mixture latent
//! distribution of an autoencoder, with the supporting losses, networks,
//! baselines and metrics.

mod codec;

pub mod baselines;
pub mod datasets;
pub mod error;
pub mod evolution;
pub mod gm_distribution;
pub mod image_hash;
pub mod lgm_loss;
pub mod metrics;
pub mod networks;
pub mod training;

pub use error::{Error, Result};
