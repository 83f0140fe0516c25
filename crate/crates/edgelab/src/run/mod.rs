//! Experiment orchestration: presets, run configuration, the training
//! loop with checkpointing and scalar logs, sweeps, offline diagnostics
//! recomputation, and plot emission.

pub mod config;
pub mod diagnose;
pub mod logs;
pub mod plots;
pub mod preset;
pub mod runner;
pub mod sweep;

pub use config::{RunConfig, TeacherSource};
pub use diagnose::{diagnose_run, DiagnoseReport};
pub use logs::{LoggedRollout, StepRecord};
pub use plots::emit_plots;
pub use preset::{preset, preset_table, table_dump, Axis, ExperimentPreset};
pub use runner::{prepare_base, preset_config, run_experiment, run_preset, RunSummary};
pub use sweep::{sweep_presets, SweepOutput, SweepRow};
