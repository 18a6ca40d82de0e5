//! Experiment runner library behind the `tqd` binary: configuration,
//! training/evaluation runs, ablation grids, and reports.

pub mod ablate;
pub mod config;
pub mod experiment;
pub mod report;

pub use ablate::{expand_grid, run_ablation, AblationError, GridCell, GridError};
pub use config::{ConfigError, RunConfig};
pub use experiment::{
    eval_checkpoint, eval_model, eval_scene, generate_eval_scenes, generate_training_scenes,
    loss_trajectory, run_experiment, train_model, write_scene_files, ExperimentError,
    ExperimentOutput,
};
pub use report::{emit_report, ReportError, ReportOutput};
