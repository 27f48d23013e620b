use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CalmError, Result};

/// One line of the run ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEntry {
    Step {
        stage_index: usize,
        stage: String,
        step: usize,
        loss: f64,
        penalty: f64,
        lr: f64,
        replayed: usize,
    },
    /// A batch without prediction targets; the step count still advances.
    Skip {
        stage_index: usize,
        stage: String,
        step: usize,
        replayed: usize,
    },
    Penalty {
        stage_index: usize,
        stage: String,
        task: String,
        lambda_weight: f64,
        samples: usize,
        file: String,
    },
    ReplayFill {
        stage_index: usize,
        stage: String,
        source: String,
        batches: usize,
    },
    Checkpoint {
        stage_index: usize,
        stage: String,
        step: usize,
        file: String,
    },
}

impl LedgerEntry {
    pub fn stage_index(&self) -> usize {
        match self {
            LedgerEntry::Step { stage_index, .. }
            | LedgerEntry::Skip { stage_index, .. }
            | LedgerEntry::Penalty { stage_index, .. }
            | LedgerEntry::ReplayFill { stage_index, .. }
            | LedgerEntry::Checkpoint { stage_index, .. } => *stage_index,
        }
    }

    fn step(&self) -> Option<usize> {
        match self {
            LedgerEntry::Step { step, .. } | LedgerEntry::Skip { step, .. } => Some(*step),
            _ => None,
        }
    }
}

/// Append-only JSON-lines log of a run.
pub struct RunLedger {
    path: PathBuf,
    writer: BufWriter<File>,
    last_step: Option<(usize, usize)>,
}

impl RunLedger {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| CalmError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), writer: BufWriter::new(file), last_step: None })
    }

    /// Reopens `path` keeping only the entries of the first `keep_stages`
    /// stages, dropping whatever a partial stage left behind.
    pub fn resume(path: &Path, keep_stages: usize) -> Result<Self> {
        let kept: Vec<LedgerEntry> = if path.exists() {
            Self::read(path)?.into_iter().filter(|e| e.stage_index() < keep_stages).collect()
        } else {
            Vec::new()
        };
        let mut ledger = Self::create(path)?;
        for e in &kept {
            ledger.append(e)?;
        }
        Ok(ledger)
    }

    pub fn append(&mut self, entry: &LedgerEntry) -> Result<()> {
        if let Some(step) = entry.step() {
            let stage = entry.stage_index();
            if let Some((s, last)) = self.last_step {
                if s == stage && step <= last {
                    return Err(CalmError::contract(format!("ledger step {step} after {last} in stage {stage}")));
                }
            }
            self.last_step = Some((stage, step));
        }
        let line = serde_json::to_string(entry).expect("entry serializes");
        writeln!(self.writer, "{line}").map_err(|e| CalmError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| CalmError::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<LedgerEntry>> {
        let file = File::open(path).map_err(|e| CalmError::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CalmError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry =
                serde_json::from_str(&line).map_err(|e| CalmError::format("ledger", format!("line {}: {e}", i + 1)))?;
            out.push(entry);
        }
        Ok(out)
    }
}
