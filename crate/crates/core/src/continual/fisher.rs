use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{mask_batch, Corpus, TokenBatch, Windows};
use crate::error::{CalmError, Result};
use crate::model::MaskedLm;
use crate::parallel;
use crate::rng;
use crate::tensor::{ParamSet, Tape, Tensor};

/// Samples per work unit. Fixed so the summation tree, and therefore the
/// result bits, do not depend on the worker count.
const CHUNK: usize = 8;

/// Diagonal empirical Fisher information, one non-negative tensor per
/// parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    values: BTreeMap<String, Tensor>,
    sample_count: usize,
}

impl FisherDiagonal {
    pub fn new(values: BTreeMap<String, Tensor>, sample_count: usize) -> Result<Self> {
        for (name, t) in &values {
            if let Some(bad) = t.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(CalmError::contract(format!(
                    "fisher entry {bad} for `{name}` is not a finite non-negative value"
                )));
            }
        }
        Ok(Self { values, sample_count })
    }

    /// All-ones surrogate shaped like `params`.
    pub fn ones_like<'a>(shapes: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Self {
        let values = shapes.into_iter().map(|(n, t)| (n.clone(), Tensor::ones(t.shape().to_vec()))).collect();
        Self { values, sample_count: 0 }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of examples averaged, 0 for the all-ones surrogate.
    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

/// Single-window masked batches for Fisher estimation: `ceil(fraction *
/// windows)` distinct windows drawn without replacement. Windows whose mask
/// selects nothing are passed over for the next one in the shuffled order.
pub fn fisher_samples(
    corpus: &Corpus,
    fraction: f64,
    seq_len: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<Vec<TokenBatch>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CalmError::contract(format!("fisher fraction {fraction} outside (0, 1]")));
    }
    let windows = Windows::new(corpus, seq_len)?;
    let wanted = (fraction * windows.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng::substream(seed, "fisher-sampling"));
    let mut mask_rng = rng::substream(seed, "fisher-masking");
    let mut out = Vec::with_capacity(wanted);
    for &w in &order {
        if out.len() == wanted {
            break;
        }
        let batch =
            mask_batch(windows.get(w), 1, seq_len, mask_prob, corpus.vocab.len(), &corpus.domain_id, &mut mask_rng)?;
        if batch.target_count() > 0 {
            out.push(batch);
        }
    }
    if out.is_empty() {
        return Err(CalmError::contract("fisher estimation drew zero usable samples"));
    }
    Ok(out)
}

/// Empirical Fisher diagonal of `model` on `corpus`:
/// `F_i = 1/N * sum_n (dL_n / d theta_i)^2` over single-window samples.
pub fn compute_fisher<M: MaskedLm + Sync>(
    model: &mut M,
    corpus: &Corpus,
    fraction: f64,
    seq_len: usize,
    mask_prob: f64,
    seed: u64,
) -> Result<FisherDiagonal> {
    let samples = fisher_samples(corpus, fraction, seq_len, mask_prob, seed)?;
    fisher_from_batches(model, &samples)
}

/// Fisher diagonal from explicit per-example batches. Each batch is one
/// example; its loss gradient is squared and averaged over all batches.
/// The model's gradients are left at zero.
pub fn fisher_from_batches<M: MaskedLm + Sync>(model: &mut M, batches: &[TokenBatch]) -> Result<FisherDiagonal> {
    if batches.is_empty() {
        return Err(CalmError::contract("fisher estimation needs at least one sample"));
    }
    let shared: &M = model;
    let partials: Vec<Vec<Tensor>> = parallel::pool().install(|| {
        batches.par_chunks(CHUNK).map(|chunk| squared_grad_sum(shared, chunk)).collect::<Result<Vec<_>>>()
    })?;
    let total = pairwise_sum(partials);
    let n = batches.len() as f64;
    let params = model.params_mut();
    params.zero_grads();
    let values = params
        .iter()
        .zip(total)
        .map(|(p, mut t)| {
            t.data_mut().iter_mut().for_each(|v| *v /= n);
            (p.name.clone(), t)
        })
        .collect();
    FisherDiagonal::new(values, batches.len())
}

fn squared_grad_sum<M: MaskedLm>(model: &M, batches: &[TokenBatch]) -> Result<Vec<Tensor>> {
    let mut local: ParamSet = model.params().clone();
    let mut acc: Vec<Tensor> = local.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
    for batch in batches {
        local.zero_grads();
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, batch)?;
        tape.backward(loss, &mut local)?;
        for (p, a) in local.iter().zip(&mut acc) {
            for (s, &g) in a.data_mut().iter_mut().zip(p.grad.data()) {
                if !g.is_finite() {
                    return Err(CalmError::NonFiniteGradient(p.name.clone()));
                }
                *s += g * g;
            }
        }
    }
    Ok(acc)
}

fn pairwise_sum(mut parts: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    x.data_mut().iter_mut().zip(y.data()).for_each(|(u, v)| *u += v);
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}
