//! Exact backward stochastic difference equations and nonlinear expectations
//! on finite filtered probability spaces.

pub mod bsde;
pub mod doobmeyer;
pub mod error;
pub mod exec;
pub mod gexp;
pub mod martrep;
pub mod probspace;
pub mod represent;
pub mod scenario;
pub mod stochcalc;

pub use error::{Error, Result};
pub use exec::Execution;
