//! Named experiments: configuration, execution and reporting.

pub mod config;
pub mod presets;
pub mod report;
pub mod runner;

pub use config::{CellConfig, EvalMode, ExperimentConfig, TaskConfig};
pub use presets::{preset, PRESETS};
pub use report::{aggregate, mean_std, write_report, Aggregate, SummaryRow};
pub use runner::{run, run_seed, RunOptions, RunReport, Workspace};
