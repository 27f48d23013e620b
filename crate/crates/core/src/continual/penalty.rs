use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FisherDiagonal;
use crate::error::{CalmError, Result};
use crate::model::{Container, ContainerKind, Snapshot};
use crate::tensor::{ParamSet, Tape, Var};

/// Quadratic anchor on one completed task:
/// `lambda * sum_i F_i * (theta_i - anchor_i)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPenalty {
    pub task_id: String,
    pub lambda_weight: f64,
    pub fisher: FisherDiagonal,
    pub anchor: Snapshot,
}

#[derive(Serialize, Deserialize)]
struct PenaltyMeta {
    task_id: String,
    lambda_weight: f64,
    sample_count: usize,
}

impl TaskPenalty {
    /// `lambda_weight` may be zero, which makes the penalty inert.
    pub fn new(
        task_id: impl Into<String>,
        fisher: FisherDiagonal,
        anchor: Snapshot,
        lambda_weight: f64,
    ) -> Result<Self> {
        if !(lambda_weight.is_finite() && lambda_weight >= 0.0) {
            return Err(CalmError::contract(format!("lambda_weight {lambda_weight} must be finite and >= 0")));
        }
        let mismatch = fisher.len() != anchor.len()
            || fisher.iter().any(|(n, f)| anchor.get(n).is_none_or(|a| a.shape() != f.shape()));
        if mismatch {
            return Err(CalmError::contract("fisher and anchor cover different parameters"));
        }
        Ok(Self { task_id: task_id.into(), lambda_weight, fisher, anchor })
    }

    /// Errors unless the penalty covers exactly the parameters of `params`.
    pub fn check_compatible(&self, params: &ParamSet) -> Result<()> {
        if params.len() != self.anchor.len() {
            return Err(CalmError::contract(format!(
                "penalty `{}` covers {} parameters, model has {}",
                self.task_id,
                self.anchor.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            match self.anchor.get(&p.name) {
                Some(a) if a.shape() == p.value.shape() => {}
                Some(a) => {
                    return Err(CalmError::contract(format!(
                        "penalty `{}` anchors `{}` with shape {:?}, model has {:?}",
                        self.task_id,
                        p.name,
                        a.shape(),
                        p.value.shape()
                    )))
                }
                None => {
                    return Err(CalmError::contract(format!("penalty `{}` lacks parameter `{}`", self.task_id, p.name)))
                }
            }
        }
        Ok(())
    }

    /// Penalty value at the current parameters, without a tape.
    pub fn value(&self, params: &ParamSet) -> Result<f64> {
        self.check_compatible(params)?;
        let mut total = 0.0;
        for p in params.iter() {
            let (a, f) = (&self.anchor.get(&p.name).expect("checked"), self.fisher.get(&p.name).expect("checked"));
            let mut s = 0.0;
            for ((&x, &y), &w) in p.value.data().iter().zip(a.data()).zip(f.data()) {
                s += w * (x - y) * (x - y);
            }
            total += self.lambda_weight * s;
        }
        Ok(total)
    }

    pub fn to_container(&self) -> Container {
        let meta = PenaltyMeta {
            task_id: self.task_id.clone(),
            lambda_weight: self.lambda_weight,
            sample_count: self.fisher.sample_count(),
        };
        let mut tensors = Vec::with_capacity(2 * self.anchor.len());
        tensors.extend(self.fisher.iter().map(|(n, t)| (format!("fisher/{n}"), t.clone())));
        tensors.extend(self.anchor.iter().map(|(n, t)| (format!("anchor/{n}"), t.clone())));
        Container {
            kind: ContainerKind::TaskPenalty,
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            tensors,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != ContainerKind::TaskPenalty {
            return Err(CalmError::IncompatibleCheckpoint("container does not hold a task penalty".into()));
        }
        let meta: PenaltyMeta = serde_json::from_str(&c.meta).map_err(|e| CalmError::format("task penalty", e))?;
        let mut fisher = BTreeMap::new();
        let mut anchor = Vec::new();
        for (name, t) in c.tensors {
            if let Some(n) = name.strip_prefix("fisher/") {
                fisher.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("anchor/") {
                anchor.push((n.to_string(), t));
            } else {
                return Err(CalmError::format("task penalty", format!("unexpected tensor `{name}`")));
            }
        }
        Self::new(
            meta.task_id,
            FisherDiagonal::new(fisher, meta.sample_count)?,
            Snapshot::from_entries(anchor),
            meta.lambda_weight,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

/// Penalty with every Fisher entry set to 1, i.e. `lambda * ||theta - anchor||^2`.
pub fn make_no_fisher_penalty(task_id: impl Into<String>, anchor: Snapshot, lambda_weight: f64) -> Result<TaskPenalty> {
    let fisher = FisherDiagonal::ones_like(anchor.iter());
    TaskPenalty::new(task_id, fisher, anchor, lambda_weight)
}

/// Sum of all task penalties at `params`, recorded on `tape`.
pub fn ewc_penalty(tape: &mut Tape, penalties: &[TaskPenalty], params: &ParamSet) -> Result<Var> {
    if penalties.is_empty() {
        return Err(CalmError::contract("ewc_penalty needs at least one task penalty"));
    }
    let mut total: Option<Var> = None;
    for pen in penalties {
        pen.check_compatible(params)?;
        for id in params.ids() {
            let p = params.get(id);
            let anchor = pen.anchor.get(&p.name).expect("checked");
            let fisher = pen.fisher.get(&p.name).expect("checked");
            let x = tape.param(params, id);
            let term = tape.weighted_sq_dist(x, anchor, fisher, pen.lambda_weight)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(total.expect("non-empty"))
}
