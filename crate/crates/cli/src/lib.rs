//! Library side of the command-line runner: instance ingestion, command
//! dispatch and report emission.

pub mod report;
pub mod runner;

pub use report::{InvariantEntry, RunReport};
pub use runner::{run_command, Command, RunConfig};
