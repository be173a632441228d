//! Identifies which latent microstructural configurations drive extreme
//! stress events.
//!
//! The pipeline: standardized features are reduced with [`pca`], a
//! full-covariance Gaussian mixture prior is fitted with [`gmm`], a quadratic
//! stress surrogate ([`stress`]) and a Frechet tail model ([`evt`]) convert
//! latent points into exceedance probabilities, and [`vi`] reweights the
//! prior into a posterior focused on extreme events. [`mcmc`] and an
//! empirical refit provide baselines, and [`classifier`] scores all of them
//! through log-likelihood ratios. [`synth`] builds the seeded synthetic
//! datasets the whole pipeline is validated on.
//!
//! All numerics are generic over the scalar type via [`scalar::Scalar`]
//! (`f32` or `f64`); the `*64` aliases at the crate root fix the default
//! `f64` precision used by the CLI and by every serialized artifact.

pub mod classifier;
pub mod data;
pub mod error;
pub mod evt;
pub mod gmm;
pub mod likelihood;
pub mod mcmc;
pub mod pca;
pub mod rng;
pub mod scalar;
pub mod stress;
pub mod synth;
pub mod vi;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Writes a value as pretty-printed JSON with a trailing newline. All model
/// artifacts go through this so reruns produce byte-identical files.
pub fn write_json_file<T: serde::Serialize>(
    path: impl AsRef<std::path::Path>,
    value: &T,
) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_json_file<T: serde::de::DeserializeOwned>(
    path: impl AsRef<std::path::Path>,
) -> Result<T> {
    let bytes = std::fs::read(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Default scalar type of the CLI and of serialized artifacts.
pub type Real = f64;

pub type FeatureTable64 = data::FeatureTable<Real>;
pub type PcaModel64 = pca::PcaModel<Real>;
pub type GmmModel64 = gmm::GmmModel<Real>;
pub type StressModel64 = stress::StressModel<Real>;
pub type FrechetTail64 = evt::FrechetTail<Real>;
pub type ViResult64 = vi::ViResult<Real>;
pub type McmcResult64 = mcmc::McmcResult<Real>;
pub type Dataset64 = synth::Dataset<Real>;
pub type World64 = synth::World<Real>;
