use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{run, RunOptions};
use crate::continual::{ReplayMode, StrategyKind};
use crate::error::{CalmError, Result};
use crate::eval::MetricsReport;
use crate::parallel;

/// Values to try; each non-empty axis multiplies the number of runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda: Vec<f64>,
    pub fisher_fraction: Vec<f64>,
    pub replay_mode: Vec<ReplayMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridPoint {
    pub lambda: Option<f64>,
    pub fisher_fraction: Option<f64>,
    pub replay_mode: Option<ReplayMode>,
}

impl SweepGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CalmError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CalmError::format("sweep grid", e))
    }

    /// Cartesian product of the non-empty axes.
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        if self.lambda.is_empty() && self.fisher_fraction.is_empty() && self.replay_mode.is_empty() {
            return Err(CalmError::contract("sweep grid has no values"));
        }
        fn axis<T: Copy>(v: &[T]) -> Vec<Option<T>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().copied().map(Some).collect()
            }
        }
        let mut out = Vec::new();
        for lambda in axis(&self.lambda) {
            for fisher_fraction in axis(&self.fisher_fraction) {
                for replay_mode in axis(&self.replay_mode) {
                    out.push(GridPoint { lambda, fisher_fraction, replay_mode });
                }
            }
        }
        Ok(out)
    }
}

impl GridPoint {
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if let Some(l) = self.lambda {
            parts.push(format!("lambda{l}"));
        }
        if let Some(f) = self.fisher_fraction {
            parts.push(format!("fisher{f}"));
        }
        if let Some(m) = self.replay_mode {
            parts.push(match m {
                ReplayMode::Interval => "replay-interval".to_string(),
                ReplayMode::EpochEnd => "replay-epoch_end".to_string(),
            });
        }
        parts.join("-")
    }

    /// `base` with this point's values on every matching stage, its own
    /// run id, and an output directory under the base one.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.run_id = format!("{}-{}", base.run_id, self.tag());
        cfg.output_dir = base.output_dir.join(&cfg.run_id);
        for s in &mut cfg.stages {
            if s.strategy.kind.uses_penalty() {
                if let Some(l) = self.lambda {
                    s.strategy.ewc.lambda_weight = l;
                }
                if let (Some(f), StrategyKind::Ewc) = (self.fisher_fraction, s.strategy.kind) {
                    s.strategy.ewc.fisher_fraction = f;
                }
            }
            if let (Some(m), StrategyKind::Er) = (self.replay_mode, s.strategy.kind) {
                s.strategy.er.mode = m;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRun {
    pub run_id: String,
    /// Forgetting ratio of the first stage's domain; lower is better.
    pub source_ratio: Option<f64>,
    /// Final perplexity of the last stage's domain; lower is better.
    pub target_perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub run_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub source_domain: String,
    pub target_domain: String,
    pub ranking: Vec<RankedRun>,
    pub failures: Vec<SweepFailure>,
}

/// Orders runs by source ratio, then target perplexity; missing values last.
pub fn rank(reports: &[MetricsReport], source: &str, target: &str) -> Vec<RankedRun> {
    let key = |x: Option<f64>| x.unwrap_or(f64::INFINITY);
    let mut rows: Vec<RankedRun> = reports
        .iter()
        .map(|r| RankedRun {
            run_id: r.run_id.clone(),
            source_ratio: r.final_ratio(source),
            target_perplexity: r.final_perplexity(target),
        })
        .collect();
    rows.sort_by(|a, b| {
        key(a.source_ratio)
            .total_cmp(&key(b.source_ratio))
            .then(key(a.target_perplexity).total_cmp(&key(b.target_perplexity)))
            .then_with(|| a.run_id.cmp(&b.run_id))
    });
    rows
}

impl SweepSummary {
    pub fn render(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let width = self.ranking.iter().map(|r| r.run_id.len()).chain([3]).max().unwrap_or(3);
        let mut out = format!(
            "{:>4}  {:<width$}  {:>12}  {:>12}\n",
            "rank",
            "run",
            format!("{} ratio", self.source_domain),
            format!("{} ppl", self.target_domain)
        );
        for (i, r) in self.ranking.iter().enumerate() {
            out.push_str(&format!(
                "{:>4}  {:<width$}  {:>12}  {:>12}\n",
                i + 1,
                r.run_id,
                cell(r.source_ratio),
                cell(r.target_perplexity)
            ));
        }
        for f in &self.failures {
            out.push_str(&format!("failed  {}: {}\n", f.run_id, f.error));
        }
        out
    }
}

/// One run per grid point. Failed runs are recorded and the sweep goes on.
/// The summary is written to the base output directory.
pub fn sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    opts: &RunOptions,
) -> Result<(Vec<MetricsReport>, SweepSummary)> {
    let points = grid.points()?;
    base.check()?;
    let configs: Vec<ExperimentConfig> = points.iter().map(|p| p.apply(base)).collect();
    let outcomes: Vec<Result<MetricsReport>> =
        parallel::pool().install(|| configs.par_iter().map(|c| run(c, opts)).collect());
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (cfg, outcome) in configs.iter().zip(outcomes) {
        match outcome {
            Ok(r) => reports.push(r),
            Err(e) => failures.push(SweepFailure { run_id: cfg.run_id.clone(), error: e.to_string() }),
        }
    }
    let source = base.stages[0].train_domains[0].clone();
    let target = base.stages.last().expect("validated").train_domains[0].clone();
    let summary = SweepSummary {
        ranking: rank(&reports, &source, &target),
        source_domain: source,
        target_domain: target,
        failures,
    };
    let dir = &base.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CalmError::io(dir, e))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(dir.join("sweep_summary.json"), json)
        .map_err(|e| CalmError::io(dir.join("sweep_summary.json"), e))?;
    std::fs::write(dir.join("sweep_summary.txt"), summary.render())
        .map_err(|e| CalmError::io(dir.join("sweep_summary.txt"), e))?;
    Ok((reports, summary))
}
