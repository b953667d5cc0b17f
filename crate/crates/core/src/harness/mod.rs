//! Experiment orchestration: configuration, cached artifacts, the
//! defense × attack grid, ablation suites and reports.

pub mod ablation;
pub mod config;
pub mod grid;
pub mod panels;
pub mod report;
pub mod store;
pub mod workbench;

pub use ablation::{run_ablation, AblationKind, AblationRun};
pub use config::{load_config, ExperimentConfig, EXPERIMENT_ROOT_ENV};
pub use grid::{run_grid, Grid, GridRun};
pub use report::{report, ReportOutput};
pub use store::{read_records, ExperimentRecord, ExperimentStore};
pub use workbench::{Keyed, Workbench};
