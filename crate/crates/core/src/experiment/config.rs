use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual::{ReplayMode, StrategyConfig, StrategyKind};
use crate::data::synth::SynthDomain;
use crate::data::DEFAULT_MASK_PROB;
use crate::error::{CalmError, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, ScheduleKind, TrainingSchedule, POLY_WARMUP_FRAC, STLR_CUT_FRAC, STLR_RATIO};

/// Model shape; the vocabulary size comes from the corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelSpec {
    pub fn with_vocab(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }
}

/// A text domain read from `path`, or generated when `synth` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthDomain>,
    #[serde(default = "default_synth_bytes")]
    pub synth_bytes: usize,
    #[serde(default)]
    pub synth_seed: u64,
}

fn default_synth_bytes() -> usize {
    2_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_cut")]
    pub cut_frac: f64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_decay")]
    pub layer_decay: f64,
}

fn default_warmup() -> f64 {
    POLY_WARMUP_FRAC
}
fn default_cut() -> f64 {
    STLR_CUT_FRAC
}
fn default_ratio() -> f64 {
    STLR_RATIO
}
fn default_decay() -> f64 {
    1.0
}

impl ScheduleSpec {
    pub fn build(&self, total_steps: usize) -> TrainingSchedule {
        TrainingSchedule {
            kind: self.kind,
            base_lr: self.base_lr,
            total_steps,
            warmup_frac: self.warmup_frac,
            cut_frac: self.cut_frac,
            ratio: self.ratio,
            layer_decay: self.layer_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub train_domains: Vec<String>,
    pub strategy: StrategyConfig,
    #[serde(default = "one")]
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    /// Caps the stage's step count below `epochs` full passes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn one() -> usize {
    1
}
fn default_mask_prob() -> f64 {
    DEFAULT_MASK_PROB
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default)]
    pub eval_seed: u64,
    /// Defaults to the model's `max_seq_len`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { mask_prob: DEFAULT_MASK_PROB, eval_seed: 0, seq_len: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub eval: EvalSpec,
    pub stages: Vec<StageSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CalmError::format("config", e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses `path`, resolving relative corpus and output paths against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CalmError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut cfg.domains {
            if let Some(p) = &d.path {
                if p.is_relative() {
                    d.path = Some(base.join(p));
                }
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn domain(&self, id: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.id == id)
    }

    pub fn eval_seq_len(&self) -> usize {
        self.eval.seq_len.unwrap_or(self.model.max_seq_len)
    }

    /// Every schema or invariant violation, empty when the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let m = &self.model;
        if self.run_id.trim().is_empty() {
            v.push("run_id must not be empty".into());
        }
        for (name, value) in [
            ("d_model", m.d_model),
            ("n_heads", m.n_heads),
            ("n_layers", m.n_layers),
            ("d_ff", m.d_ff),
            ("max_seq_len", m.max_seq_len),
        ] {
            if value == 0 {
                v.push(format!("model.{name} must be positive"));
            }
        }
        if m.n_heads > 0 && !m.d_model.is_multiple_of(m.n_heads) {
            v.push(format!("model.d_model {} is not divisible by n_heads {}", m.d_model, m.n_heads));
        }

        if self.domains.is_empty() {
            v.push("at least one domain is required".into());
        }
        let mut ids = BTreeSet::new();
        for d in &self.domains {
            if d.id.trim().is_empty() {
                v.push("domain id must not be empty".into());
            } else if !ids.insert(d.id.as_str()) {
                v.push(format!("domain `{}` declared twice", d.id));
            }
            match (&d.path, &d.synth) {
                (Some(_), Some(_)) => v.push(format!("domain `{}` sets both path and synth", d.id)),
                (None, None) => v.push(format!("domain `{}` needs a path or a synth kind", d.id)),
                (None, Some(_)) if d.synth_bytes == 0 => {
                    v.push(format!("domain `{}` synth_bytes must be positive", d.id))
                }
                _ => {}
            }
        }

        let e = &self.eval;
        if !(e.mask_prob > 0.0 && e.mask_prob <= 1.0) {
            v.push(format!("eval.mask_prob {} outside (0, 1]", e.mask_prob));
        }
        if self.eval_seq_len() == 0 || self.eval_seq_len() > m.max_seq_len {
            v.push(format!("eval.seq_len {} outside [1, max_seq_len]", self.eval_seq_len()));
        }

        if self.stages.is_empty() {
            v.push("at least one stage is required".into());
        }
        let mut names = BTreeSet::new();
        for (k, s) in self.stages.iter().enumerate() {
            let at = format!("stage `{}`", s.name);
            if s.name.trim().is_empty() {
                v.push(format!("stage {k} needs a name"));
            } else if !names.insert(s.name.as_str()) {
                v.push(format!("stage name `{}` used twice", s.name));
            }
            for d in &s.train_domains {
                if self.domain(d).is_none() {
                    v.push(format!("{at} trains on undeclared domain `{d}`"));
                }
            }
            let distinct: BTreeSet<_> = s.train_domains.iter().collect();
            if distinct.len() != s.train_domains.len() {
                v.push(format!("{at} lists a train domain twice"));
            }
            let kind = s.strategy.kind;
            if kind == StrategyKind::Mdl {
                if s.train_domains.len() < 2 {
                    v.push(format!("{at}: mdl requires ≥2 domains"));
                }
                let w = &s.strategy.mdl.weights;
                if !w.is_empty() {
                    if w.len() != s.train_domains.len() {
                        v.push(format!("{at}: mdl weights need one entry per train domain"));
                    }
                    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                        v.push(format!("{at}: mdl weights must be non-negative with a positive sum"));
                    }
                }
            } else if s.train_domains.len() != 1 {
                v.push(format!("{at}: strategy {} trains on exactly one domain", kind.name()));
            }
            if kind.uses_penalty() {
                let ewc = &s.strategy.ewc;
                if !(ewc.lambda_weight.is_finite() && ewc.lambda_weight >= 0.0) {
                    v.push(format!("{at}: lambda_weight must be >= 0"));
                }
                if kind == StrategyKind::Ewc && !(ewc.fisher_fraction > 0.0 && ewc.fisher_fraction <= 1.0) {
                    v.push(format!("{at}: fisher_fraction must be in (0, 1]"));
                }
                if k == 0 {
                    v.push(format!("{at}: {} needs an earlier stage to anchor to", kind.name()));
                }
            }
            if kind == StrategyKind::Er {
                let er = &s.strategy.er;
                if k == 0 {
                    v.push(format!("{at}: er needs an earlier stage to replay"));
                } else if self.stages[k - 1].train_domains.len() != 1 {
                    v.push(format!("{at}: er replays a single-domain previous stage"));
                }
                if er.mode == ReplayMode::Interval && (er.interval_steps == 0 || er.updates_per_event == 0) {
                    v.push(format!("{at}: interval replay needs interval_steps and updates_per_event >= 1"));
                }
                if !(er.buffer_fraction > 0.0 && er.buffer_fraction <= 1.0) {
                    v.push(format!("{at}: buffer_fraction must be in (0, 1]"));
                }
            }
            if kind == StrategyKind::Lrc {
                if s.schedule.kind != ScheduleKind::Stlr {
                    v.push(format!("{at}: lrc requires an stlr schedule"));
                }
                if s.schedule.layer_decay.is_nan() || s.schedule.layer_decay <= 1.0 {
                    v.push(format!("{at}: lrc requires layer_decay > 1"));
                }
            }
            if s.epochs == 0 {
                v.push(format!("{at}: epochs must be >= 1"));
            }
            if s.batch_size == 0 {
                v.push(format!("{at}: batch_size must be >= 1"));
            }
            if s.seq_len == 0 || s.seq_len > m.max_seq_len {
                v.push(format!("{at}: seq_len {} outside [1, max_seq_len {}]", s.seq_len, m.max_seq_len));
            }
            if !(s.mask_prob > 0.0 && s.mask_prob < 1.0) {
                v.push(format!("{at}: mask_prob {} outside (0, 1)", s.mask_prob));
            }
            if s.max_steps == Some(0) {
                v.push(format!("{at}: max_steps must be >= 1"));
            }
            if !(s.schedule.base_lr.is_finite() && s.schedule.base_lr > 0.0) {
                v.push(format!("{at}: base_lr must be positive"));
            }
            if let Err(err) = s.schedule.build(1).validate() {
                v.push(format!("{at}: {err}"));
            }
            let a = &s.adam;
            if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0)
            {
                v.push(format!("{at}: adam needs betas in [0, 1), eps > 0, weight_decay >= 0"));
            }
        }
        v
    }

    /// Errors with every violation when the config is not usable.
    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CalmError::InvalidConfig(v))
        }
    }
}
