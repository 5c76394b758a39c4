//! Command surface for wavecast: dataset generation, training, evaluation,
//! unroll sweeps, verification oracles, interpretation panels and profiling.

pub mod commands;
pub mod config;
pub mod error;
pub mod oracle;
pub mod plot;

pub use config::RunConfig;
pub use error::CliError;
