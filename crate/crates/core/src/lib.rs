#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Mean-field approximation of strongly log-concave Gibbs measures on R^n.
//!
//! The library solves the product-measure fixed point by coordinate ascent
//! over grid densities, certifies two-sided log-partition-function intervals
//! from conditional-variance and cross-derivative bounds, and ships the
//! application engines (graph Gibbs measures, Bayesian linear regression,
//! distributed stochastic control) plus the oracles and samplers used to
//! check everything at desk scale.

pub mod error;
pub mod grid1d;
pub mod linalg;
pub mod models;

mod gauss_hermite;
mod rng;

pub mod accept;
pub mod certify;
pub mod control;
pub mod limits;
pub mod mfsolver;
pub mod modelspec;
pub mod oracle;
pub mod sampler;

pub use error::{Error, Result};
pub use gauss_hermite::GaussHermite;
pub use rng::CounterRng;
