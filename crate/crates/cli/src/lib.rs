//! The `mofo` command line: argument definitions, run manifests and the
//! subcommand implementations.

pub mod args;
pub mod commands;
pub mod failure;

pub use args::{Cli, Command};
pub use commands::{run, RunManifest, RUN_MANIFEST};
pub use failure::Failure;
