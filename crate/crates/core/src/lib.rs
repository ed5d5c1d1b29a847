//! Exponential functionals of killed Lévy processes.

pub mod distribution;
pub mod error;
pub mod exponents;
pub mod ladders;
pub mod quadrature;
pub mod roots;
pub mod simulation;
pub mod special;
pub mod stable;
pub mod stats;

pub use error::{Error, Result};
