//! Stochastic maximum principle for controlled jump SDEs driven by
//! orthogonal martingale random fields, with a Monte Carlo toolkit for the
//! non-anticipating derivative, the adjoint equations and the optimality
//! conditions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod credit;
pub mod derivative;
pub mod dissecting;
pub mod error;
pub mod max_principle;
pub mod models;
pub mod noise;
pub mod registry;
pub mod regression;
pub mod rng;
pub mod runner;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use registry::Registry;
