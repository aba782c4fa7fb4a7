//! Experiment orchestration: settings files and overrides, end-to-end
//! runs under each data scenario, the schedule ablation grid, durable
//! ledgers and checkpoints, and plot-data extraction.

pub mod checkpoint;
pub mod config;
pub mod grid;
pub mod ledger;
pub mod plots;
pub mod runner;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use config::{
    config_hash, load_config, DataConfig, ExperimentConfig, Overrides, CONFIG_ENV_VAR,
    LEDGER_FILE,
};
pub use grid::{run_ablation_grid, GridCell, GridSpec};
pub use ledger::{LedgerRecord, RunLedger};
pub use plots::{emit_plot_data, summary_table, PlotFiles};
pub use runner::{load_dataset, resume_experiment, run_experiment, verify_ledger_costs};
