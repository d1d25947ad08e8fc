//! Clustering of `L`-fold noisy observations to common centers under the
//! weighted `r`-th power distortion `Σ_ℓ λ_ℓ ‖u − y_ℓ‖^r`, together with its
//! high-resolution asymptotic theory and the partition-similarity metrics
//! used to evaluate it.

pub mod error;
pub mod experiment;
pub mod highres;
pub mod lloyd;
pub mod metrics;
pub mod model;
pub mod quadrature;
pub mod quantizer;

pub use error::{Error, Result};
pub use lloyd::{fit, fit_from, fit_multistart, FitHistory, FitOptions};
pub use model::{Codebook, DistortionSpec, FitInfo, MultiDataset, MultiSample, Partition};
