//! Adam and the learning-rate schedules.

mod adam;
mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use schedule::{
    layer_lr, ScheduleKind, TrainingSchedule, LRC_LAYER_DECAY, POLY_WARMUP_FRAC, STLR_CUT_FRAC, STLR_RATIO,
};
