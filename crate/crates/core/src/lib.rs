//! Total-correlation-explanation autoencoders.
//!
//! A self-contained toolkit for information-theoretic representation
//! learning: learn latent codes that explain the dependence among observed
//! variables (measured as total correlation) while staying disentangled
//! themselves. The variational bound on that objective coincides with the
//! VAE evidence lower bound up to a constant, which this crate exploits:
//! the same machinery trains plain, anchored (per-latent KL weights), and
//! stacked hierarchical models, and exact discrete/Gaussian oracles verify
//! every bound against ground truth.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`rng`]: dense f64 tensors, reverse-mode
//!   autodiff, deterministic splittable randomness.
//! - [`nn`]: MLPs, parameter storage, Adam, binary checkpoints.
//! - [`dist`]: diagonal Gaussians, factorized Bernoullis, categoricals.
//! - [`info`]: exact total-correlation oracles and mutual-information
//!   estimators built on aggregated-posterior mixtures.
//! - [`model`]: hierarchical encoder/decoder stacks, including a discrete
//!   top layer with exact categorical marginalization.
//! - [`objective`]: the variational bounds (plain / anchored / stacked).
//! - [`data`]: synthetic datasets with analytic ground truth, IDX loading.
//! - [`report`]: prior vs aggregated-marginal sampling, latent traversals,
//!   variance/MI reports, PGM grids.

pub mod data;
pub mod dist;
mod error;
pub mod info;
pub mod model;
pub mod nn;
pub mod objective;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Value};
pub use tensor::Tensor;
