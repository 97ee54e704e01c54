//! Ground-truth information-theoretic quantities and estimators.
//!
//! Exact oracles first: total correlation and its identities on fully
//! enumerable discrete joints, closed-form Gaussian total correlation, and
//! an exactly evaluable tabular encoder/decoder/prior bound. On top of
//! those sit the Monte Carlo estimators used on trained models: the
//! aggregated-posterior mixture for each latent dimension and the KL-based
//! per-dimension mutual-information estimates.
//!
//! All information quantities are in nats.

mod discrete;
mod estimate;
mod gaussian;
mod mixture;

pub use discrete::{DiscreteJoint, Side, TabularCorex};
pub use estimate::{
    estimate_mi_input, estimate_mi_latent, estimate_mi_latent_std, mean_and_se, Estimator,
    McConfig, MiEntry, MiReport, PosteriorSet,
};
pub use gaussian::{gaussian_tc, GaussianJoint};
pub use mixture::{fit_aggregated_marginal, GaussMixture1d};

/// Hard cap on enumerable joint sizes.
pub const ENUMERATION_GUARD: usize = 1 << 20;
