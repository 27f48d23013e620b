use serde::{Deserialize, Serialize};

/// Mitigation strategy of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    None,
    /// Multi-domain learning: train on a weighted mixture of domains.
    Mdl,
    Ewc,
    /// EWC with the Fisher diagonal replaced by ones.
    EwcNoFisher,
    /// Learning-rate control: STLR with layerwise decay.
    Lrc,
    /// Experience replay from a buffer of earlier-domain batches.
    Er,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Mdl => "mdl",
            StrategyKind::Ewc => "ewc",
            StrategyKind::EwcNoFisher => "ewc_no_fisher",
            StrategyKind::Lrc => "lrc",
            StrategyKind::Er => "er",
        }
    }

    pub fn uses_penalty(self) -> bool {
        matches!(self, StrategyKind::Ewc | StrategyKind::EwcNoFisher)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwcConfig {
    pub lambda_weight: f64,
    /// Fraction of the previous domain's training windows used for the
    /// Fisher estimate.
    pub fisher_fraction: f64,
    /// Keep the penalties of all earlier tasks (true) or only the latest.
    pub accumulate: bool,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self { lambda_weight: 1.0, fisher_fraction: 0.001, accumulate: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// `updates_per_event` replay batches every `interval_steps` steps.
    Interval,
    /// One event at the end of each epoch sized by `buffer_fraction`.
    EpochEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayLr {
    /// The schedule's rate at the event step.
    Current,
    /// The schedule's peak rate.
    Peak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub mode: ReplayMode,
    pub interval_steps: usize,
    pub updates_per_event: usize,
    /// Fraction of the previous domain's training windows kept in the buffer.
    pub buffer_fraction: f64,
    pub lr: ReplayLr,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            mode: ReplayMode::EpochEnd,
            interval_steps: 1000,
            updates_per_event: 10,
            buffer_fraction: 0.001,
            lr: ReplayLr::Peak,
        }
    }
}

impl ReplayConfig {
    /// Buffer size in batches for a source of `source_windows` windows.
    pub fn buffer_batches(&self, source_windows: usize, batch_size: usize) -> usize {
        let windows = (self.buffer_fraction * source_windows as f64).ceil() as usize;
        windows.div_ceil(batch_size.max(1))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdlConfig {
    /// Sampling weight per training domain; empty means uniform.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default)]
    pub ewc: EwcConfig,
    #[serde(default)]
    pub er: ReplayConfig,
    #[serde(default)]
    pub mdl: MdlConfig,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self::of(StrategyKind::None)
    }
}

impl StrategyConfig {
    pub fn of(kind: StrategyKind) -> Self {
        Self { kind, ewc: EwcConfig::default(), er: ReplayConfig::default(), mdl: MdlConfig::default() }
    }

    pub fn ewc(lambda_weight: f64, fisher_fraction: f64) -> Self {
        let mut s = Self::of(StrategyKind::Ewc);
        s.ewc.lambda_weight = lambda_weight;
        s.ewc.fisher_fraction = fisher_fraction;
        s
    }

    pub fn ewc_no_fisher(lambda_weight: f64) -> Self {
        let mut s = Self::of(StrategyKind::EwcNoFisher);
        s.ewc.lambda_weight = lambda_weight;
        s
    }

    pub fn replay(er: ReplayConfig) -> Self {
        Self { er, ..Self::of(StrategyKind::Er) }
    }
}

/// Replay events within one epoch as `(step, batches)`, where `step` counts
/// completed training steps of the epoch.
pub fn replay_plan(
    config: &ReplayConfig,
    epoch_len: usize,
    source_windows: usize,
    batch_size: usize,
) -> Vec<(usize, usize)> {
    match config.mode {
        ReplayMode::Interval => {
            let every = config.interval_steps.max(1);
            (1..=epoch_len / every).map(|k| (k * every, config.updates_per_event)).collect()
        }
        ReplayMode::EpochEnd if epoch_len > 0 => {
            vec![(epoch_len, config.buffer_batches(source_windows, batch_size))]
        }
        ReplayMode::EpochEnd => Vec::new(),
    }
}
