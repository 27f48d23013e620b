use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Container, ContainerKind};
use super::MaskedLm;
use crate::data::TokenBatch;
use crate::error::{CalmError, Result};
use crate::rng;
use crate::tensor::{ParamId, ParamSet, Parameter, Tape, Tensor, Var, IGNORE};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(CalmError::contract(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CalmError::contract(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Layer group of the LM head, the topmost group.
    pub fn top_group(&self) -> usize {
        self.n_layers + 1
    }
}

struct BlockIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ff_in_w: ParamId,
    ff_in_b: ParamId,
    ff_out_w: ParamId,
    ff_out_b: ParamId,
}

/// Pre-LN transformer encoder with a tied masked-LM head.
///
/// Layer groups: embeddings are group 0, block `i` is group `i + 1`, and the
/// final layer norm plus output bias form group `n_layers + 1`.
pub struct MlmModel {
    config: ModelConfig,
    params: ParamSet,
    token_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<BlockIds>,
    head_ln_gain: ParamId,
    head_ln_bias: ParamId,
    head_bias: ParamId,
}

/// Deep copy of parameter values keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    values: BTreeMap<String, Tensor>,
}

impl Snapshot {
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

    pub fn of(params: &ParamSet) -> Self {
        Self { values: params.iter().map(|p| (p.name.clone(), p.value.clone())).collect() }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self { values: entries.into_iter().collect() }
    }

    /// Overwrite parameter values; grads are left alone.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<()> {
        if self.values.len() != params.len() {
            return Err(CalmError::IncompatibleCheckpoint(format!(
                "snapshot has {} tensors, model has {}",
                self.values.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            match self.values.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => {
                    return Err(CalmError::IncompatibleCheckpoint(format!(
                        "`{}` has shape {:?} in snapshot, {:?} in model",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(CalmError::IncompatibleCheckpoint(format!("snapshot lacks `{}`", p.name))),
            }
        }
        for p in params.iter_mut() {
            p.value = self.values[&p.name].clone();
        }
        Ok(())
    }
}

impl MlmModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(config.seed, "init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = ParamSet::new();
        let mut add = |name: String, shape: Vec<usize>, group: usize, fill: Option<f64>| -> Result<ParamId> {
            let numel = shape.iter().product();
            let data = match fill {
                Some(v) => vec![v; numel],
                None => (0..numel).map(|_| normal.sample(&mut rng)).collect(),
            };
            params.add(Parameter::new(name, Tensor::new(shape, data)?, group))
        };
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let token_embed = add("embed.token".into(), vec![v, d], 0, None)?;
        let pos_embed = add("embed.position".into(), vec![config.max_seq_len, d], 0, None)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let g = i + 1;
            let p = |s: &str| format!("block{i}.{s}");
            blocks.push(BlockIds {
                ln1_gain: add(p("ln1.gain"), vec![d], g, Some(1.0))?,
                ln1_bias: add(p("ln1.bias"), vec![d], g, Some(0.0))?,
                q_w: add(p("attn.q.weight"), vec![d, d], g, None)?,
                q_b: add(p("attn.q.bias"), vec![d], g, Some(0.0))?,
                k_w: add(p("attn.k.weight"), vec![d, d], g, None)?,
                k_b: add(p("attn.k.bias"), vec![d], g, Some(0.0))?,
                v_w: add(p("attn.v.weight"), vec![d, d], g, None)?,
                v_b: add(p("attn.v.bias"), vec![d], g, Some(0.0))?,
                out_w: add(p("attn.out.weight"), vec![d, d], g, None)?,
                out_b: add(p("attn.out.bias"), vec![d], g, Some(0.0))?,
                ln2_gain: add(p("ln2.gain"), vec![d], g, Some(1.0))?,
                ln2_bias: add(p("ln2.bias"), vec![d], g, Some(0.0))?,
                ff_in_w: add(p("ffn.in.weight"), vec![d, f], g, None)?,
                ff_in_b: add(p("ffn.in.bias"), vec![f], g, Some(0.0))?,
                ff_out_w: add(p("ffn.out.weight"), vec![f, d], g, None)?,
                ff_out_b: add(p("ffn.out.bias"), vec![d], g, Some(0.0))?,
            });
        }
        let top = config.top_group();
        let head_ln_gain = add("head.ln.gain".into(), vec![d], top, Some(1.0))?;
        let head_ln_bias = add("head.ln.bias".into(), vec![d], top, Some(0.0))?;
        let head_bias = add("head.bias".into(), vec![v], top, Some(0.0))?;
        Ok(Self { config, params, token_embed, pos_embed, blocks, head_ln_gain, head_ln_bias, head_bias })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::of(&self.params)
    }

    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        snapshot.restore_into(&mut self.params)
    }

    fn check_inputs(&self, inputs: &[u32], batch: usize, seq_len: usize) -> Result<()> {
        if inputs.len() != batch * seq_len || seq_len == 0 {
            return Err(CalmError::shape("mlm_forward", format!("{} ids for {batch} x {seq_len}", inputs.len())));
        }
        if seq_len > self.config.max_seq_len {
            return Err(CalmError::contract(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(CalmError::contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Final-layer-normed hidden states, shape `(batch * seq_len, d_model)`.
    /// Attention probabilities `(batch, heads, seq, seq)` per block are pushed
    /// to `attention` when given.
    pub fn hidden(
        &self,
        tape: &mut Tape,
        inputs: &[u32],
        batch: usize,
        seq_len: usize,
        mut attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        self.check_inputs(inputs, batch, seq_len)?;
        let (d, h) = (self.config.d_model, self.config.n_heads);
        let dh = d / h;
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);

        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let table = p(tape, self.token_embed);
        let tok = tape.embedding(table, &ids, &[batch, seq_len])?;
        let pos_table = p(tape, self.pos_embed);
        let positions: Vec<usize> = (0..seq_len).collect();
        let pos = tape.embedding(pos_table, &positions, &[seq_len])?;
        let mut x = tape.add(tok, pos)?;

        let linear = |tape: &mut Tape, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let w = tape.param(&self.params, w);
            let b = tape.param(&self.params, b);
            let y = tape.matmul(x, w)?;
            tape.add(y, b)
        };
        let split_heads = |tape: &mut Tape, x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[batch, seq_len, h, dh])?;
            tape.transpose(x, 1, 2)
        };

        for blk in &self.blocks {
            let g = p(tape, blk.ln1_gain);
            let b = p(tape, blk.ln1_bias);
            let normed = tape.layer_norm(x, g, b)?;
            let q = linear(tape, normed, blk.q_w, blk.q_b)?;
            let q = split_heads(tape, q)?;
            let k = linear(tape, normed, blk.k_w, blk.k_b)?;
            let k = split_heads(tape, k)?;
            let v = linear(tape, normed, blk.v_w, blk.v_b)?;
            let v = split_heads(tape, v)?;
            let kt = tape.transpose(k, 2, 3)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = tape.softmax(scores)?;
            if let Some(sink) = attention.as_deref_mut() {
                sink.push(probs);
            }
            let ctx = tape.matmul(probs, v)?;
            let ctx = tape.transpose(ctx, 1, 2)?;
            let ctx = tape.reshape(ctx, &[batch, seq_len, d])?;
            let attn_out = linear(tape, ctx, blk.out_w, blk.out_b)?;
            x = tape.add(x, attn_out)?;

            let g = p(tape, blk.ln2_gain);
            let b = p(tape, blk.ln2_bias);
            let normed = tape.layer_norm(x, g, b)?;
            let ff = linear(tape, normed, blk.ff_in_w, blk.ff_in_b)?;
            let ff = tape.gelu(ff);
            let ff = linear(tape, ff, blk.ff_out_w, blk.ff_out_b)?;
            x = tape.add(x, ff)?;
        }
        let g = p(tape, self.head_ln_gain);
        let b = p(tape, self.head_ln_bias);
        let x = tape.layer_norm(x, g, b)?;
        tape.reshape(x, &[batch * seq_len, d])
    }

    /// Vocabulary logits at the given flat positions of `hidden`.
    pub fn logits_at(&self, tape: &mut Tape, hidden: Var, positions: &[usize]) -> Result<Var> {
        let picked = tape.embedding(hidden, positions, &[positions.len()])?;
        let table = tape.param(&self.params, self.token_embed);
        let decoder = tape.transpose(table, 0, 1)?;
        let logits = tape.matmul(picked, decoder)?;
        let bias = tape.param(&self.params, self.head_bias);
        tape.add(logits, bias)
    }

    /// Mean cross-entropy over the batch's prediction targets.
    pub fn mlm_loss(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Var> {
        let (positions, targets) = target_positions(batch);
        if positions.is_empty() {
            return Err(CalmError::EmptyLoss);
        }
        let hidden = self.hidden(tape, &batch.inputs, batch.batch_size, batch.seq_len, None)?;
        let logits = self.logits_at(tape, hidden, &positions)?;
        tape.cross_entropy(logits, &targets)
    }

    /// Summed negative log-likelihood over the batch's targets and the
    /// number of targets. No gradients are kept.
    pub fn masked_nll(&self, batch: &TokenBatch) -> Result<(f64, usize)> {
        let (positions, targets) = target_positions(batch);
        if positions.is_empty() {
            return Ok((0.0, 0));
        }
        let mut tape = Tape::new();
        let hidden = self.hidden(&mut tape, &batch.inputs, batch.batch_size, batch.seq_len, None)?;
        let logits = self.logits_at(&mut tape, hidden, &positions)?;
        let lv = tape.value(logits);
        let v = self.config.vocab_size;
        let mut total = 0.0;
        for (row, &t) in lv.data().chunks_exact(v).zip(&targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
        }
        Ok((total, targets.len()))
    }

    /// Attention probability tensors, one per block.
    pub fn attention_maps(&self, inputs: &[u32], batch: usize, seq_len: usize) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut maps = Vec::new();
        self.hidden(&mut tape, inputs, batch, seq_len, Some(&mut maps))?;
        Ok(maps.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: ContainerKind::Model,
            meta: serde_json::to_string(&self.config).expect("config serializes"),
            tensors: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != ContainerKind::Model {
            return Err(CalmError::IncompatibleCheckpoint(format!("{} is not a model checkpoint", path.display())));
        }
        let config: ModelConfig = serde_json::from_str(&c.meta).map_err(|e| CalmError::format("checkpoint", e))?;
        let mut model = MlmModel::new(config)?;
        model.restore(&Snapshot::from_entries(c.tensors))?;
        Ok(model)
    }
}

fn target_positions(batch: &TokenBatch) -> (Vec<usize>, Vec<i64>) {
    batch.targets.iter().enumerate().filter(|(_, &t)| t != IGNORE).map(|(i, &t)| (i, t)).unzip()
}

impl MaskedLm for MlmModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Var> {
        self.mlm_loss(tape, batch)
    }

    fn masked_nll(&self, batch: &TokenBatch) -> Result<(f64, usize)> {
        MlmModel::masked_nll(self, batch)
    }
}
