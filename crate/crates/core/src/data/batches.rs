use rand::seq::SliceRandom;
use rand::Rng as _;

use super::corpus::Corpus;
use super::masking::{mask_batch, TokenBatch};
use crate::error::{CalmError, Result};
use crate::rng::{self, Rng};

/// A corpus token stream cut into non-overlapping length-`seq_len` windows.
#[derive(Debug, Clone)]
pub struct Windows {
    tokens: Vec<u32>,
    seq_len: usize,
    pub domain_id: String,
}

impl Windows {
    pub fn new(corpus: &Corpus, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(CalmError::contract("seq_len must be positive"));
        }
        let tokens = corpus.token_stream();
        if tokens.len() < seq_len {
            return Err(CalmError::InsufficientData(format!(
                "corpus `{}` has {} tokens, shorter than one window of {seq_len}",
                corpus.domain_id,
                tokens.len()
            )));
        }
        Ok(Self { tokens, seq_len, domain_id: corpus.domain_id.clone() })
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn get(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

/// Seeded, shuffled, masked batches over one pass of a corpus.
///
/// The trailing partial batch is dropped.
pub struct BatchStream {
    windows: Windows,
    order: Vec<usize>,
    next: usize,
    batch_size: usize,
    mask_prob: f64,
    vocab_size: usize,
    mask_rng: Rng,
}

/// One epoch of masked batches from `corpus`. The window order comes from
/// the `shuffle` substream of `seed` and the masks from its `masking`
/// substream, so a new seed per epoch gives dynamic masking.
pub fn batch_iter(
    corpus: &Corpus,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    mask_prob: f64,
) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(CalmError::contract("batch_size must be positive"));
    }
    let windows = Windows::new(corpus, seq_len)?;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng::substream(seed, "shuffle"));
    Ok(BatchStream {
        windows,
        order,
        next: 0,
        batch_size,
        mask_prob,
        vocab_size: corpus.vocab.len(),
        mask_rng: rng::substream(seed, "masking"),
    })
}

impl BatchStream {
    /// Full batches this stream yields in total.
    pub fn batch_count(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn window_count(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchStream {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        if self.next + self.batch_size > self.order.len() {
            return None;
        }
        let l = self.windows.seq_len();
        let mut seqs = Vec::with_capacity(self.batch_size * l);
        for &w in &self.order[self.next..self.next + self.batch_size] {
            seqs.extend_from_slice(self.windows.get(w));
        }
        self.next += self.batch_size;
        let batch = mask_batch(
            &seqs,
            self.batch_size,
            l,
            self.mask_prob,
            self.vocab_size,
            &self.windows.domain_id,
            &mut self.mask_rng,
        )
        .expect("window shape and mask_prob validated at construction");
        Some(batch)
    }
}

/// Endless stream where each batch comes from corpus `k` with probability
/// `weights[k]`. Each corpus is iterated as by [`batch_iter`] with the same
/// seed; when one runs out it restarts with a fresh per-pass seed.
pub struct MixedStream<'a> {
    corpora: Vec<&'a Corpus>,
    cumulative: Vec<f64>,
    streams: Vec<BatchStream>,
    passes: Vec<u64>,
    select_rng: Rng,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    mask_prob: f64,
}

pub fn mixed_iter<'a>(
    corpora: &[&'a Corpus],
    weights: &[f64],
    batch_size: usize,
    seq_len: usize,
    seed: u64,
    mask_prob: f64,
) -> Result<MixedStream<'a>> {
    if corpora.is_empty() || corpora.len() != weights.len() {
        return Err(CalmError::contract(format!("{} corpora with {} mixing weights", corpora.len(), weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(CalmError::contract("mixing weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(CalmError::contract("mixing weights are all zero"));
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(CalmError::contract(format!("mixing weights sum to {total}, expected 1")));
    }
    let cumulative = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let streams =
        corpora.iter().map(|c| batch_iter(c, batch_size, seq_len, seed, mask_prob)).collect::<Result<Vec<_>>>()?;
    for s in &streams {
        if s.batch_count() == 0 {
            return Err(CalmError::InsufficientData(format!("a mixed corpus has fewer than {batch_size} windows")));
        }
    }
    Ok(MixedStream {
        corpora: corpora.to_vec(),
        cumulative,
        streams,
        passes: vec![0; corpora.len()],
        select_rng: rng::substream(seed, "mix-select"),
        batch_size,
        seq_len,
        seed,
        mask_prob,
    })
}

impl Iterator for MixedStream<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        let u: f64 = self.select_rng.random();
        let k = self.cumulative.iter().position(|&c| u < c).unwrap_or(self.cumulative.len() - 1);
        if let Some(b) = self.streams[k].next() {
            return Some(b);
        }
        self.passes[k] += 1;
        let seed = rng::derive_seed(self.seed, &format!("mix-pass-{}-{}", k, self.passes[k]));
        self.streams[k] = batch_iter(self.corpora[k], self.batch_size, self.seq_len, seed, self.mask_prob).ok()?;
        self.streams[k].next()
    }
}
