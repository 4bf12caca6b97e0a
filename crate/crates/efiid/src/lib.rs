//! Exact sampling of lattice spin systems by coupling from the past, with
//! coarse-grained diagnostics of the coupling structure.

pub mod cftp;
pub mod checks;
pub mod coarse;
pub mod error;
pub mod experiments;
pub mod lattice;
pub mod model;
pub mod oracle;
pub mod quadrature;
pub mod randomness;
pub mod stats;
pub mod swm;
pub mod tree;
pub mod xy;

pub use error::{Error, Result};
