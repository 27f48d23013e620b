use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};

/// Layerwise decay factor used by learning-rate control.
pub const LRC_LAYER_DECAY: f64 = 2.6;
pub const STLR_CUT_FRAC: f64 = 0.1;
pub const STLR_RATIO: f64 = 32.0;
pub const POLY_WARMUP_FRAC: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear warmup then linear decay to zero.
    Polynomial,
    /// Slanted triangular: short linear rise, long linear decay.
    Stlr,
}

/// Learning-rate policy over `total_steps` plus per-layer-group decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub cut_frac: f64,
    pub ratio: f64,
    /// 1.0 disables layerwise decay.
    pub layer_decay: f64,
}

impl TrainingSchedule {
    pub fn polynomial(base_lr: f64, total_steps: usize, warmup_frac: f64) -> Self {
        Self {
            kind: ScheduleKind::Polynomial,
            base_lr,
            total_steps,
            warmup_frac,
            cut_frac: STLR_CUT_FRAC,
            ratio: STLR_RATIO,
            layer_decay: 1.0,
        }
    }

    pub fn stlr(base_lr: f64, total_steps: usize, cut_frac: f64, ratio: f64) -> Self {
        Self {
            kind: ScheduleKind::Stlr,
            base_lr,
            total_steps,
            warmup_frac: POLY_WARMUP_FRAC,
            cut_frac,
            ratio,
            layer_decay: 1.0,
        }
    }

    pub fn with_layer_decay(mut self, layer_decay: f64) -> Self {
        self.layer_decay = layer_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CalmError::contract(m));
        if self.total_steps == 0 {
            return bad("schedule total_steps must be >= 1".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(self.layer_decay.is_finite() && self.layer_decay > 0.0) {
            return bad(format!("layer_decay {} must be positive", self.layer_decay));
        }
        match self.kind {
            ScheduleKind::Polynomial if !(0.0..1.0).contains(&self.warmup_frac) => {
                bad(format!("warmup_frac {} outside [0, 1)", self.warmup_frac))
            }
            ScheduleKind::Stlr if !(self.cut_frac > 0.0 && self.cut_frac < 1.0) => {
                bad(format!("cut_frac {} outside (0, 1)", self.cut_frac))
            }
            ScheduleKind::Stlr if self.ratio.is_nan() || self.ratio <= 1.0 => {
                bad(format!("ratio {} must exceed 1", self.ratio))
            }
            _ => Ok(()),
        }
    }

    /// Step index of the STLR peak.
    pub fn cut(&self) -> usize {
        ((self.cut_frac * self.total_steps as f64).floor() as usize).clamp(1, self.total_steps)
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps as f64).floor() as usize
    }

    /// Learning rate at step `t` in `[0, total_steps]`.
    pub fn lr_at(&self, t: usize) -> Result<f64> {
        let total = self.total_steps;
        if t > total {
            return Err(CalmError::contract(format!("step {t} outside schedule of {total} steps")));
        }
        let eta = self.base_lr;
        Ok(match self.kind {
            ScheduleKind::Polynomial => {
                let w = self.warmup_steps();
                if t < w {
                    eta * t as f64 / w as f64
                } else {
                    eta * (total - t) as f64 / (total - w) as f64
                }
            }
            ScheduleKind::Stlr => {
                let cut = self.cut();
                let p = if t <= cut {
                    t as f64 / cut as f64
                } else {
                    // (T - cut) equals cut * (1/cut_frac - 1) whenever cut_frac * T
                    // is whole, and keeps the endpoint at base_lr / ratio otherwise.
                    1.0 - (t - cut) as f64 / (total - cut) as f64
                };
                eta * (1.0 + p * (self.ratio - 1.0)) / self.ratio
            }
        })
    }

    /// `base` scaled for layer group `group` when `top` is the highest group.
    pub fn layer_lr(&self, base: f64, group: usize, top: usize) -> f64 {
        layer_lr(base, self.layer_decay, group, top)
    }
}

/// `base / decay^(top - group)`: each group below the top runs `decay`
/// times slower than the one above it.
pub fn layer_lr(base: f64, decay: f64, group: usize, top: usize) -> f64 {
    let depth = top.saturating_sub(group);
    base / decay.powi(depth as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stlr_reference_points() {
        let s = TrainingSchedule::stlr(0.01, 100, 0.1, 32.0);
        assert_eq!(s.lr_at(10).unwrap(), 0.01);
        assert_eq!(s.lr_at(0).unwrap(), 0.01 / 32.0);
        assert!((s.lr_at(0).unwrap() - 3.125e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(100).unwrap(), 0.01 / 32.0);
        assert!(s.lr_at(101).is_err());
    }

    #[test]
    fn polynomial_endpoints() {
        let s = TrainingSchedule::polynomial(0.01, 100, 0.06);
        assert_eq!(s.lr_at(100).unwrap(), 0.0);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(6).unwrap(), 0.01);
        assert!((s.lr_at(3).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn layer_lr_examples() {
        assert_eq!(layer_lr(1e-3, 2.6, 5, 5), 1e-3);
        assert!((layer_lr(1e-3, 2.6, 4, 5) - 3.84615e-4).abs() < 1e-9);
        for l in 0..=5 {
            assert_eq!(layer_lr(1e-3, 1.0, l, 5), 1e-3);
        }
    }

    #[test]
    fn validation() {
        assert!(TrainingSchedule::stlr(0.01, 100, 0.0, 32.0).validate().is_err());
        assert!(TrainingSchedule::stlr(0.01, 100, 0.1, 1.0).validate().is_err());
        assert!(TrainingSchedule::polynomial(0.01, 0, 0.06).validate().is_err());
        assert!(TrainingSchedule::polynomial(0.01, 10, 1.0).validate().is_err());
        assert!(TrainingSchedule::polynomial(0.01, 10, 0.0).validate().is_ok());
    }
}
