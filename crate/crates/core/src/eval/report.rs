use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DomainPerplexity;
use crate::continual::StrategyConfig;
use crate::error::{CalmError, Result};

pub const METRIC: &str = "masked-token perplexity on held-out test splits";

/// Change in one domain's perplexity across a shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub domain_id: String,
    pub before: f64,
    pub after: f64,
    /// `after - before`; positive means the domain got worse.
    pub delta: f64,
    /// `after / before`.
    pub ratio: f64,
}

pub fn forgetting_delta(before: &DomainPerplexity, after: &DomainPerplexity) -> Result<Forgetting> {
    if before.domain_id != after.domain_id {
        return Err(CalmError::contract(format!(
            "cannot compare perplexity of `{}` with `{}`",
            before.domain_id, after.domain_id
        )));
    }
    Ok(Forgetting {
        domain_id: before.domain_id.clone(),
        before: before.perplexity,
        after: after.perplexity,
        delta: after.perplexity - before.perplexity,
        ratio: after.perplexity / before.perplexity,
    })
}

/// Evaluation of every configured domain at one point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub label: String,
    /// Training steps completed in the whole run so far.
    pub step: usize,
    pub domains: Vec<DomainPerplexity>,
}

impl Checkpoint {
    pub fn domain(&self, domain_id: &str) -> Option<&DomainPerplexity> {
        self.domains.iter().find(|d| d.domain_id == domain_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStrategy {
    pub stage: String,
    pub train_domains: Vec<String>,
    pub strategy: StrategyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStrategy {
    /// Short human label, e.g. `none -> ewc(lambda=1)`.
    pub label: String,
    pub stages: Vec<StageStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftDelta {
    pub from: String,
    pub to: String,
    #[serde(flatten)]
    pub forgetting: Forgetting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub metric: String,
    pub strategy: RunStrategy,
    pub checkpoints: Vec<Checkpoint>,
    pub deltas: Vec<ShiftDelta>,
}

impl MetricsReport {
    pub fn new(run_id: impl Into<String>, strategy: RunStrategy) -> Self {
        Self { run_id: run_id.into(), metric: METRIC.into(), strategy, checkpoints: Vec::new(), deltas: Vec::new() }
    }

    /// Appends a checkpoint; it must cover the same domains as the first.
    pub fn push_checkpoint(&mut self, checkpoint: Checkpoint) -> Result<()> {
        if let Some(first) = self.checkpoints.first() {
            let ids = |c: &Checkpoint| c.domains.iter().map(|d| d.domain_id.clone()).collect::<Vec<_>>();
            if ids(first) != ids(&checkpoint) {
                return Err(CalmError::contract(format!(
                    "checkpoint `{}` covers {:?}, earlier checkpoints cover {:?}",
                    checkpoint.label,
                    ids(&checkpoint),
                    ids(first)
                )));
            }
        }
        self.checkpoints.push(checkpoint);
        Ok(())
    }

    pub fn checkpoint(&self, label: &str) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.label == label)
    }

    /// Records the change of `domain_id` between two existing checkpoints.
    pub fn add_delta(&mut self, from: &str, to: &str, domain_id: &str) -> Result<()> {
        let lookup = |label: &str| {
            self.checkpoint(label)
                .and_then(|c| c.domain(domain_id))
                .ok_or_else(|| CalmError::contract(format!("no `{domain_id}` perplexity at checkpoint `{label}`")))
        };
        let forgetting = forgetting_delta(lookup(from)?, lookup(to)?)?;
        self.deltas.push(ShiftDelta { from: from.into(), to: to.into(), forgetting });
        Ok(())
    }

    /// Perplexity of `domain_id` at the last checkpoint.
    pub fn final_perplexity(&self, domain_id: &str) -> Option<f64> {
        self.checkpoints.last()?.domain(domain_id).map(|d| d.perplexity)
    }

    /// Forgetting ratio of `domain_id` ending at the last checkpoint.
    pub fn final_ratio(&self, domain_id: &str) -> Option<f64> {
        let last = &self.checkpoints.last()?.label;
        self.deltas
            .iter()
            .rev()
            .find(|d| d.forgetting.domain_id == domain_id && &d.to == last)
            .map(|d| d.forgetting.ratio)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CalmError::format("report", e))
    }
}

/// Writes `report` as JSON to `path` and as a text table next to it, with
/// the extension replaced by `txt`.
pub fn emit_report(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()).map_err(|e| CalmError::io(path, e))?;
    let table_path = path.with_extension("txt");
    std::fs::write(&table_path, render_table(std::slice::from_ref(report))).map_err(|e| CalmError::io(&table_path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CalmError::io(path, e))?;
    MetricsReport::from_json(&text)
}

/// One row per report: final perplexity per domain, then the forgetting
/// ratio of every domain that was shifted away from.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut domains: Vec<String> = Vec::new();
    let mut ratio_domains: Vec<String> = Vec::new();
    for r in reports {
        for d in r.checkpoints.last().map(|c| c.domains.as_slice()).unwrap_or_default() {
            if !domains.contains(&d.domain_id) {
                domains.push(d.domain_id.clone());
            }
        }
    }
    for d in &domains {
        if reports.iter().any(|r| r.final_ratio(d).is_some()) {
            ratio_domains.push(d.clone());
        }
    }
    let mut header = vec!["run".to_string(), "strategy".to_string()];
    header.extend(domains.iter().map(|d| format!("{d} ppl")));
    header.extend(ratio_domains.iter().map(|d| format!("{d} ratio")));
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.run_id.clone(), r.strategy.label.clone()];
            row.extend(domains.iter().map(|d| cell(r.final_perplexity(d))));
            row.extend(ratio_domains.iter().map(|d| cell(r.final_ratio(d))));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    out.push_str(&line(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>()));
    for row in &rows {
        out.push_str(&line(row));
    }
    out.push_str(&format!("\nppl: {METRIC}; ratio: final / before the shift away from the domain\n"));
    out
}
