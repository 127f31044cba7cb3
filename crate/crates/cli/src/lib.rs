//! Command implementations behind the `reverse` binary.

pub mod commands;
pub mod config;
pub mod serve;

pub use commands::{
    cmd_curate, cmd_decode, cmd_eval, cmd_serve, cmd_sweep, cmd_synth, cmd_train, ExitError, OutcomeLine, PromptRecord,
    SweepRow,
};
pub use config::{Overrides, RunConfig};
