//! Open-loop mean-field equilibria for a time-inconsistent mean-variance
//! portfolio game in which each agent's risk aversion switches between two
//! levels depending on whether the agent is ahead of or behind the
//! population average.

pub mod boundary;
pub mod density;
pub mod error;
pub mod fixedpoint;
pub mod model;
pub mod mollify;
pub mod pde;
pub mod simulate;
pub mod validate;
mod tridiag;

pub use error::{Error, Result};
