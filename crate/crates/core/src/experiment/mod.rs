//! Experiment configuration, staged runs, ledgers and sweeps.

mod config;
mod ledger;
mod runner;
mod sweep;

pub use config::{DomainSpec, EvalSpec, ExperimentConfig, ModelSpec, ScheduleSpec, StageSpec};
pub use ledger::{LedgerEntry, RunLedger};
pub use runner::{checkpoint_label, run, run_strategy, RunOptions, LEDGER_FILE, REPORT_FILE};
pub use sweep::{rank, sweep, GridPoint, RankedRun, SweepFailure, SweepGrid, SweepSummary};
