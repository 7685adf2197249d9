//! Pointwise feature-space adversarial perturbation for unsupervised domain
//! adaptation in semantic segmentation.
//!
//! A segmentation network is split into a feature extractor `G` and a
//! classifier `F`. After `G` and `F` are trained on labeled source images,
//! `G` is frozen and training alternates between perturbing source and
//! target features toward the classifier's and discriminator's weak spots
//! ([`perturb`]) and updating `F` and the domain discriminator `D` on both
//! the clean and the perturbed features ([`train`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod models;
pub mod perturb;
pub mod train;

pub use error::{Error, Result};
