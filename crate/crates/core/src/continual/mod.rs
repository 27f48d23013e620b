//! Forgetting mitigation: EWC, replay scheduling and the strategy-aware
//! training step.

mod fisher;
mod penalty;
mod strategy;
mod trainer;

pub use fisher::{compute_fisher, fisher_from_batches, fisher_samples, FisherDiagonal};
pub use penalty::{ewc_penalty, make_no_fisher_penalty, TaskPenalty};
pub use strategy::{
    replay_plan, EwcConfig, MdlConfig, ReplayConfig, ReplayLr, ReplayMode, StrategyConfig, StrategyKind,
};
pub use trainer::{StepMetrics, Trainer};
