use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mask_batch, Corpus, Windows};
use crate::error::{CalmError, Result};
use crate::model::MaskedLm;
use crate::parallel;
use crate::rng;

/// Windows per evaluation forward pass. Fixed so the reduction order, and
/// therefore the result bits, never depend on the worker count.
const EVAL_CHUNK: usize = 64;

/// Masked-token perplexity of one model on one held-out corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPerplexity {
    pub domain_id: String,
    pub perplexity: f64,
    /// Masked positions scored.
    pub token_count: usize,
}

impl DomainPerplexity {
    /// Perplexity from a summed negative log-likelihood over `token_count`
    /// predictions.
    pub fn from_nll(domain_id: impl Into<String>, nll_sum: f64, token_count: usize) -> Result<Self> {
        if token_count == 0 {
            return Err(CalmError::contract("perplexity over zero masked positions"));
        }
        let perplexity = (nll_sum / token_count as f64).exp();
        if !perplexity.is_finite() {
            return Err(CalmError::NonFinite(format!("perplexity from nll sum {nll_sum}")));
        }
        Ok(Self { domain_id: domain_id.into(), perplexity, token_count })
    }
}

/// `exp(mean NLL)` over every window of `corpus` under a mask fixed by
/// `eval_seed`, so that all models evaluated with the same seed are scored
/// on the same positions.
pub fn perplexity<M: MaskedLm + Sync>(
    model: &M,
    corpus: &Corpus,
    seq_len: usize,
    mask_prob: f64,
    eval_seed: u64,
) -> Result<DomainPerplexity> {
    let windows = Windows::new(corpus, seq_len)?;
    let mut mask_rng = rng::substream(eval_seed, "eval-masking");
    let mut batches = Vec::with_capacity(windows.len().div_ceil(EVAL_CHUNK));
    for start in (0..windows.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(windows.len());
        let seqs: Vec<u32> = (start..end).flat_map(|w| windows.get(w).iter().copied()).collect();
        let batch =
            mask_batch(&seqs, end - start, seq_len, mask_prob, corpus.vocab.len(), &corpus.domain_id, &mut mask_rng)?;
        batches.push(batch);
    }
    let parts: Vec<(f64, usize)> =
        parallel::pool().install(|| batches.par_iter().map(|b| model.masked_nll(b)).collect::<Result<Vec<_>>>())?;
    let (nll, count) = parts.iter().fold((0.0, 0), |(s, c), &(x, n)| (s + x, c + n));
    DomainPerplexity::from_nll(&corpus.domain_id, nll, count)
}
