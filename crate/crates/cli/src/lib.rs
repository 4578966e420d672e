//! Command-line driver for the affine-lab toolkit: strict JSON configuration,
//! four subcommands, and CSV/JSON artifacts that carry their own metadata.

pub mod config;
pub mod run;

pub use config::{parse_config, ConfigError, RunConfig};
pub use run::{run, Command, Outcome, RunError};
