use rand::Rng;

use super::vocab::{MASK, RESERVED};
use crate::error::{CalmError, Result};
use crate::tensor::IGNORE;

pub const DEFAULT_MASK_PROB: f64 = 0.15;

/// Masked-LM examples: corrupted inputs plus targets at selected positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    /// `batch_size * seq_len` token ids after corruption, row-major.
    pub inputs: Vec<u32>,
    /// Original ids at selected positions, [`IGNORE`] elsewhere.
    pub targets: Vec<i64>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub domain_id: String,
}

impl TokenBatch {
    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }

    /// Row `b` as a standalone single-example batch.
    pub fn row(&self, b: usize) -> TokenBatch {
        let span = b * self.seq_len..(b + 1) * self.seq_len;
        TokenBatch {
            inputs: self.inputs[span.clone()].to_vec(),
            targets: self.targets[span].to_vec(),
            batch_size: 1,
            seq_len: self.seq_len,
            domain_id: self.domain_id.clone(),
        }
    }
}

/// BERT-style dynamic masking of `batch_size x seq_len` token ids.
///
/// Each position draws `u ~ U[0,1)` and is selected when `u < mask_prob`.
/// A selected position then draws `r ~ U[0,1)`: below 0.8 it becomes
/// [`MASK`], below 0.9 a uniformly random ordinary token, otherwise it is
/// kept. These draws are the only use of `rng`, in position order.
pub fn mask_batch<R: Rng + ?Sized>(
    sequences: &[u32],
    batch_size: usize,
    seq_len: usize,
    mask_prob: f64,
    vocab_size: usize,
    domain_id: &str,
    rng: &mut R,
) -> Result<TokenBatch> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(CalmError::contract(format!("mask_prob {mask_prob} outside [0, 1]")));
    }
    if sequences.len() != batch_size * seq_len {
        return Err(CalmError::shape(
            "mask_batch",
            format!("{} tokens for batch {batch_size} x {seq_len}", sequences.len()),
        ));
    }
    let ordinary = vocab_size.saturating_sub(RESERVED as usize) as u32;
    let mut inputs = sequences.to_vec();
    let mut targets = vec![IGNORE; sequences.len()];
    for (pos, &tok) in sequences.iter().enumerate() {
        let u: f64 = rng.random();
        if u >= mask_prob {
            continue;
        }
        targets[pos] = i64::from(tok);
        let r: f64 = rng.random();
        if r < 0.8 {
            inputs[pos] = MASK;
        } else if r < 0.9 {
            inputs[pos] = if ordinary > 0 { RESERVED + rng.random_range(0..ordinary) } else { MASK };
        }
    }
    Ok(TokenBatch { inputs, targets, batch_size, seq_len, domain_id: domain_id.to_string() })
}
