//! Configuration, checkpoints, self-tests and the command implementations
//! behind the `rsrb` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod selftest;

pub use checkpoint::CheckpointError;
pub use commands::{cmd_eval, cmd_selftest, cmd_train, cmd_visualize, exit_code, CliError, FrameSource};
pub use config::{Config, ConfigError};
pub use selftest::Scope;
