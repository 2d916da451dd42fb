//! Grid-based inversion of the excited-state density-to-potential map for
//! non-interacting fermions.

pub mod diagnostics;
pub mod dual;
pub mod error;
pub mod grid;
pub mod inversion;
pub mod io;
pub mod manybody;
pub mod purestate;
pub mod spectral;

pub use error::{Error, Result};
pub use grid::{Boundary, Field, Grid};
