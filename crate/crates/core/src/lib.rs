//! Partitioned finite-element solver for a two-layer mechanochemical model.

#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::excessive_precision,
    clippy::len_without_is_empty
)]

pub mod assembly;
pub mod coupler;
pub mod error;
pub mod integrator;
pub mod kinetics;
pub mod linalg;
pub mod mesh;
pub mod output;
pub mod scenario;
pub mod spaces;
pub mod verification;

pub use error::{Error, Result};
