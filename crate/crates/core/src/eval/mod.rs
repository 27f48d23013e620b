//! Held-out perplexity, forgetting measures and run reports.

mod perplexity;
mod report;

pub use perplexity::{perplexity, DomainPerplexity};
pub use report::{
    emit_report, forgetting_delta, read_report, render_table, Checkpoint, Forgetting, MetricsReport, RunStrategy,
    ShiftDelta, StageStrategy, METRIC,
};
