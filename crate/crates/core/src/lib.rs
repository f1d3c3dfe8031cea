//! Elliptical processes: Gaussian-process generalizations built as continuous
//! scale mixtures of Gaussians whose mixing distributions are spline
//! normalizing flows, trained by sparse variational inference.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod cli;
pub mod data;
pub mod diffopt;
pub mod elliptical;
pub mod error;
pub mod exact_gp;
pub mod flow;
pub mod kernels;
pub mod likelihoods;
pub mod metrics;
pub mod mixing;
pub mod quadrature;
pub mod variational;

pub use error::{Error, Result};
