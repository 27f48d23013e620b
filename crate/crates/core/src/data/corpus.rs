use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;

use super::vocab::{Vocabulary, PAD};
use crate::error::{CalmError, Result};
use crate::rng;

/// One read of a corpus, tagged with the phase that was active at the time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    pub phase: String,
    pub domain_id: String,
    pub split: String,
}

#[derive(Debug, Default)]
struct AccessLogInner {
    phase: String,
    records: Vec<AccessRecord>,
}

/// Shared audit trail of corpus reads.
///
/// Attach it to corpora with [`Corpus::with_audit`]; the experiment runner
/// sets the phase before each stage so tests can check which domains a
/// stage touched.
#[derive(Debug, Clone, Default)]
pub struct AccessLog {
    inner: Arc<Mutex<AccessLogInner>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_phase(&self, phase: impl Into<String>) {
        self.inner.lock().unwrap().phase = phase.into();
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.inner.lock().unwrap().records.clone()
    }

    fn record(&self, domain_id: &str, split: &str) {
        let mut inner = self.inner.lock().unwrap();
        let rec =
            AccessRecord { phase: inner.phase.clone(), domain_id: domain_id.to_string(), split: split.to_string() };
        inner.records.push(rec);
    }
}

/// Tokenized documents of one domain (or one split of it).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub domain_id: String,
    pub documents: Vec<Vec<u32>>,
    pub vocab: Arc<Vocabulary>,
    split: String,
    audit: Option<AccessLog>,
}

/// Blank-line separated documents of a text, trimmed, empties dropped.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line.trim_end());
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CalmError::io(path, e))
}

/// Read a UTF-8 file of blank-line separated documents into a corpus.
pub fn ingest(path: &Path, domain_id: &str, vocab: Arc<Vocabulary>) -> Result<Corpus> {
    let text = read_text(path)?;
    Corpus::from_text(&text, domain_id, vocab)
}

impl Corpus {
    pub fn from_text(text: &str, domain_id: &str, vocab: Arc<Vocabulary>) -> Result<Self> {
        let documents: Vec<Vec<u32>> = split_documents(text).iter().map(|d| vocab.encode(d)).collect();
        Self::from_documents(domain_id, documents, vocab)
    }

    pub fn from_documents(domain_id: &str, documents: Vec<Vec<u32>>, vocab: Arc<Vocabulary>) -> Result<Self> {
        let documents: Vec<Vec<u32>> = documents.into_iter().filter(|d| !d.is_empty()).collect();
        if documents.is_empty() {
            return Err(CalmError::EmptyCorpus(domain_id.to_string()));
        }
        let size = vocab.len() as u32;
        if documents.iter().flatten().any(|&t| t >= size) {
            return Err(CalmError::contract(format!("corpus `{domain_id}` has token ids outside the vocabulary")));
        }
        Ok(Self { domain_id: domain_id.to_string(), documents, vocab, split: "all".into(), audit: None })
    }

    pub fn with_audit(mut self, log: AccessLog) -> Self {
        self.audit = Some(log);
        self
    }

    pub fn split_name(&self) -> &str {
        &self.split
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(Vec::len).sum::<usize>() + self.documents.len().saturating_sub(1)
    }

    /// Documents joined by the boundary token (PAD). Every reader of corpus
    /// contents goes through here so the audit log sees it.
    pub fn token_stream(&self) -> Vec<u32> {
        if let Some(log) = &self.audit {
            log.record(&self.domain_id, &self.split);
        }
        let mut out = Vec::with_capacity(self.token_count());
        for (i, doc) in self.documents.iter().enumerate() {
            if i > 0 {
                out.push(PAD);
            }
            out.extend_from_slice(doc);
        }
        out
    }

    /// Number of complete length-`seq_len` windows.
    pub fn window_count(&self, seq_len: usize) -> usize {
        self.token_count().checked_div(seq_len).unwrap_or(0)
    }

    fn part(&self, split: &str, documents: Vec<Vec<u32>>) -> Corpus {
        Corpus {
            domain_id: self.domain_id.clone(),
            documents,
            vocab: self.vocab.clone(),
            split: split.to_string(),
            audit: self.audit.clone(),
        }
    }

    /// Seeded document-level 80/10/10 split into (train, valid, test).
    ///
    /// Valid and test each get `floor(n / 10)` documents; train gets the rest.
    pub fn split(&self, seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
        let n = self.documents.len();
        if n < 10 {
            return Err(CalmError::InsufficientData(format!(
                "corpus `{}` has {n} documents; splitting needs at least 10",
                self.domain_id
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::substream(seed, "split"));
        let n_held = n / 10;
        let n_train = n - 2 * n_held;
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.documents[i].clone()).collect::<Vec<_>>();
        Ok((
            self.part("train", pick(&order[..n_train])),
            self.part("valid", pick(&order[n_train..n_train + n_held])),
            self.part("test", pick(&order[n_train + n_held..])),
        ))
    }
}
