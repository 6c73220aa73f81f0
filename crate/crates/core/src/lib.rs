//! Two non-degenerate mechanical oscillators coupled through a
//! bichromatically pumped cavity: closed-form rates, truncated Fock-space
//! master-equation integration at several levels of approximation, and
//! phase-space observables.

pub mod coeffs;
pub mod dynamics;
pub mod error;
pub mod fock;
pub mod model;
pub mod observables;

pub use error::{Error, Result};
