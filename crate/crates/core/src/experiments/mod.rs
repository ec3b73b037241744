//! End-to-end experiments: the synthetic sparsity task, gradient statistics,
//! statistical checks of the estimators and the scaling benchmark, with
//! their configuration and result formats.

pub mod bench;
pub mod checks;
pub mod commands;
pub mod config;
pub mod gradstats;
pub mod results;
pub mod sparsity;
pub mod train;

pub use bench::{run_scaling_bench, BenchConfig, BenchResult};
pub use commands::{run_command, Command, CommandOutput, Overrides};
pub use config::Config;
pub use gradstats::{gradient_statistics, GradStats};
pub use results::{Record, RunInfo};
pub use sparsity::{generate_sparsity_dataset, Dataset, SparsitySpec, SyntheticExample};
pub use train::{run_sparsity_experiment, SparsityRun, SparsityTrainConfig};
