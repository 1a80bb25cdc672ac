//! Robust logarithmic utility maximization with consumption, solved through
//! quadratic BSDEs on a recombining Brownian lattice or, for deterministic
//! coefficients, through the equivalent backward ODE.

pub mod bsde;
pub mod constraints;
pub mod error;
pub mod generator;
pub mod lattice;
pub mod model;
pub mod numeric;
pub mod penalty;
pub mod verify;

pub use error::{Error, Result};
