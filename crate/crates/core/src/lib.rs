//! Monte Carlo verification of the stochastic maximum principle for
//! continuous-time portfolio problems under cumulative prospect theory.
//!
//! The objective weights outcomes through probability distortions applied to
//! the cross-sectional law of the state, so it is not an expectation of a
//! function of the path. Everything here works on simulated ensembles: the
//! law is replaced by the empirical distribution of the current cross-section.

pub mod adjoint;
pub mod cli;
pub mod empirical;
pub mod error;
pub mod functional;
pub mod interp;
pub mod pipeline;
pub mod preference;
pub mod principle;
pub mod scenarios;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
