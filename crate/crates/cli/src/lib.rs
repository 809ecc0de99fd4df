//! Command-line harness: run directories, plotting, the ablation lattice and
//! the fold comparison.

pub mod ablation;
pub mod error;
pub mod ops;
pub mod plot;
pub mod run;

pub use error::{HarnessError, Result, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
