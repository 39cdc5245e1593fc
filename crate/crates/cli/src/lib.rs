//! Executable surface of the solver: instance generation, end-to-end runs,
//! sparsifier quality reports and the invariant suite.

pub mod commands;
pub mod error;
pub mod harness;
pub mod report;
pub mod suite;

pub use error::{CliError, CliResult};
