//! Configuration, persistence, reporting and the CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod report;
pub mod stages;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, Provenance};
pub use cli::run_command;
pub use config::RunConfig;
