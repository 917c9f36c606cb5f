//! Batch harness around [`filterprune`]: run configs, dataset ingestion,
//! checkpoints, metric streams and the `filterprune` command pipeline.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod pipeline;

pub use config::{parse_config, RunConfig};
pub use pipeline::{dispatch, CliError, Command, Invocation, Outcome};
