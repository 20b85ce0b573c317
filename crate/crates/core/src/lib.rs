//! Particle-ensemble regression with Bayesian excess risk diagnostics.
//!
//! An ensemble of `M` networks with a shared learned noise variance defines
//! the predictive mixture `p^q(y|x) = (1/M) Σᵢ N(y; fᵢ(x), v²)`. The crate
//! trains such ensembles under several objectives, evaluates their
//! uncertainty and risk decompositions, and drives Thompson-sampling bandits.

// `!(a > b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod risk;
pub mod rng;
pub mod scan;
pub mod study;
pub mod uncertainty;
pub mod verify;

pub use data::{Dataset, NormStats, Synthetic, Truth};
pub use ensemble::{Ensemble, GaussianMixture};
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use nn::{Activation, NetworkSpec, ParameterVector};
pub use objectives::{ObjectiveKind, ObjectiveSpec, Repulsion, TrainConfig, TrainHistory};
pub use risk::{LossKind, RiskReport};
pub use uncertainty::{IntervalEstimate, IntervalMethod, QuadratureSpec};

/// Version tag written into every run manifest.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
