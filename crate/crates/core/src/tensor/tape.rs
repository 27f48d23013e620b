use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, gemm, MatView};
use super::{ParamId, ParamSet, Tensor};
use crate::error::{CalmError, Result};

/// Target marker for positions that carry no loss.
pub const IGNORE: i64 = -1;

const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
        d0: usize,
        d1: usize,
    },
    Sum {
        a: Var,
    },
    /// Stores d(value)/dx directly; the forward already computed it.
    WeightedSqDist {
        x: Var,
        dx: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Record of differentiable ops in execution order.
///
/// Nodes are appended as ops run, so the vector order is already a
/// topological order of the computation graph.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx]
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.node(v).requires_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var { tape: self.id, idx }
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, param: None });
        Var { tape: self.id, idx }
    }

    /// A leaf bound to a parameter; `backward` accumulates into its `grad`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: params.get(id).value.clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var { tape: self.id, idx }
    }

    /// Matrix product. `b` is either a matrix shared across all leading axes
    /// of `a`, or has exactly the same leading (batch) axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || CalmError::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = vec![0.0; rows * n];
            gemm(MatView::row_major(av, rows, k), MatView::row_major(bv, k, n), &mut out, 0.0);
            out
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    MatView::row_major(&av[i * m * k..(i + 1) * m * k], m, k),
                    MatView::row_major(&bv[i * k * n..(i + 1) * k * n], k, n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            out
        };
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Elementwise sum; `b` broadcasts over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let reps = self.broadcast_reps("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len().max(1)).take(reps) {
            chunk.iter_mut().zip(bv).for_each(|(x, y)| *x += y);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product; `b` broadcasts over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let reps = self.broadcast_reps("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len().max(1)).take(reps) {
            chunk.iter_mut().zip(bv).for_each(|(x, y)| *x *= y);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    fn broadcast_reps(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(CalmError::shape(op, format!("{sa:?} and {sb:?} (only leading-axis broadcast)")));
        }
        Ok(sa[..sa.len() - sb.len()].iter().product())
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a);
        let out = value.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a);
        let d = *value.shape().last().ok_or_else(|| CalmError::shape("softmax", "scalar input"))?;
        let mut out = value.data().to_vec();
        if d > 0 {
            out.chunks_exact_mut(d).for_each(kernels::softmax_row);
        }
        let value = Tensor::new(value.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| CalmError::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(CalmError::shape(
                "layer_norm",
                format!("input {sx:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a);
        let out = value.data().iter().map(|&x| kernels::gelu(x)).collect();
        let value = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Gelu { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a);
        let out = value.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(value.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Tanh { a }, &[a])
    }

    /// Row lookup: output shape is `ids_shape ++ [cols]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(CalmError::shape("embedding", format!("table must be 2-d, got {st:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(CalmError::shape("embedding", format!("{} ids for shape {ids_shape:?}", ids.len())));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(CalmError::shape("embedding", format!("id {bad} out of range for table {st:?}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean cross-entropy of `logits` (N x V) against `targets`, skipping
    /// positions marked [`IGNORE`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(CalmError::shape("cross_entropy", format!("logits {sl:?} with {} targets", targets.len())));
        }
        let v = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE && (t < 0 || t as usize >= v)) {
            return Err(CalmError::contract(format!("target {bad} outside vocabulary of {v}")));
        }
        let count = targets.iter().filter(|&&t| t != IGNORE).count();
        if count == 0 {
            return Err(CalmError::EmptyLoss);
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_exact_mut(v).zip(targets) {
            if t == IGNORE {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            total += kernels::log_sum_exp(row) - row[t as usize];
            kernels::softmax_row(row);
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, &[logits]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a);
        if shape.iter().product::<usize>() != value.numel() {
            return Err(CalmError::shape("reshape", format!("{:?} -> {shape:?}", value.shape())));
        }
        let value = Tensor::new(shape.to_vec(), value.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let value = self.value(a);
        let nd = value.ndim();
        if d0 >= nd || d1 >= nd {
            return Err(CalmError::shape("transpose", format!("axes ({d0},{d1}) of {:?}", value.shape())));
        }
        let (out, shape) = kernels::swap_axes(value.data(), value.shape(), d0, d1);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Transpose { a, d0, d1 }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a }, &[a])
    }

    /// `weight_scale * sum(weight * (x - anchor)^2)` as a scalar.
    pub fn weighted_sq_dist(&mut self, x: Var, anchor: &Tensor, weight: &Tensor, weight_scale: f64) -> Result<Var> {
        let sx = self.shape(x);
        if anchor.shape() != sx || weight.shape() != sx {
            return Err(CalmError::shape(
                "weighted_sq_dist",
                format!("input {sx:?}, anchor {:?}, weight {:?}", anchor.shape(), weight.shape()),
            ));
        }
        let xv = self.value(x).data();
        let mut total = 0.0;
        let mut dx = Vec::with_capacity(xv.len());
        for ((&xi, &ai), &wi) in xv.iter().zip(anchor.data()).zip(weight.data()) {
            let diff = xi - ai;
            total += wi * diff * diff;
            dx.push(2.0 * weight_scale * wi * diff);
        }
        let value = Tensor::scalar(weight_scale * total);
        Ok(self.push(value, Op::WeightedSqDist { x, dx }, &[x]))
    }

    /// Reverse pass from a scalar `loss`, accumulating into parameter grads.
    ///
    /// Parameters not reachable from `loss` are left untouched.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(CalmError::contract("loss variable is not on this tape"));
        }
        if self.nodes[loss.idx].value.numel() != 1 {
            return Err(CalmError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);
        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                let p = params.get_mut(pid);
                if p.grad.numel() != g.len() {
                    return Err(CalmError::contract(format!("parameter `{}` changed shape since recording", p.name)));
                }
                p.grad.data_mut().iter_mut().zip(&g).for_each(|(acc, x)| *acc += x);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.idx].requires_grad {
            return;
        }
        match &mut grads[v.idx] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                let (sa, sb) = (av.shape(), bv.shape());
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                if sb.len() == 2 {
                    let rows: usize = sa[..sa.len() - 1].iter().product();
                    if self.needs(*a) {
                        let mut da = vec![0.0; rows * k];
                        gemm(MatView::row_major(g, rows, n), MatView::transposed(bv.data(), k, n), &mut da, 0.0);
                        self.accumulate(grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(MatView::transposed(av.data(), rows, k), MatView::row_major(g, rows, n), &mut db, 0.0);
                        self.accumulate(grads, *b, db);
                    }
                } else {
                    let m = sa[sa.len() - 2];
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    if self.needs(*a) {
                        let mut da = vec![0.0; batch * m * k];
                        for i in 0..batch {
                            gemm(
                                MatView::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                                MatView::transposed(&bv.data()[i * k * n..(i + 1) * k * n], k, n),
                                &mut da[i * m * k..(i + 1) * m * k],
                                0.0,
                            );
                        }
                        self.accumulate(grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            gemm(
                                MatView::transposed(&av.data()[i * m * k..(i + 1) * m * k], m, k),
                                MatView::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                                &mut db[i * k * n..(i + 1) * k * n],
                                0.0,
                            );
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*b) {
                    let nb = self.nodes[b.idx].value.numel();
                    let mut db = vec![0.0; nb];
                    for chunk in g.chunks_exact(nb.max(1)) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    self.accumulate(grads, *b, db);
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.idx].value.data();
                let bv = self.nodes[b.idx].value.data();
                let nb = bv.len().max(1);
                if self.needs(*a) {
                    let mut da = g.to_vec();
                    for chunk in da.chunks_exact_mut(nb) {
                        chunk.iter_mut().zip(bv).for_each(|(d, y)| *d *= y);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for (gc, ac) in g.chunks_exact(nb).zip(av.chunks_exact(nb)) {
                        for ((d, gi), ai) in db.iter_mut().zip(gc).zip(ac) {
                            *d += gi * ai;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, g.iter().map(|x| x * factor).collect());
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(g.chunks_exact(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.nodes[gain.idx].value.data();
                let d = gv.len();
                if self.needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(o, (a, b))| *o += a * b);
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(o, a)| *o += a);
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let inv_d = 1.0 / d as f64;
                    for (r, ((dr, gr), hr)) in
                        dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(xhat.chunks_exact(d)).enumerate()
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            dr[j] = rstd[r] * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu { a } => {
                let xv = self.nodes[a.idx].value.data();
                self.accumulate(grads, *a, g.iter().zip(xv).map(|(gi, &x)| gi * kernels::gelu_grad(x)).collect());
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                self.accumulate(grads, *a, g.iter().zip(y).map(|(gi, t)| gi * (1.0 - t * t)).collect());
            }
            Op::Embedding { table, ids } => {
                let tv = &self.nodes[table.idx].value;
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (&i, gr) in ids.iter().zip(g.chunks_exact(d.max(1))) {
                    dt[i * d..(i + 1) * d].iter_mut().zip(gr).for_each(|(o, x)| *o += x);
                }
                self.accumulate(grads, *table, dt);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.nodes[logits.idx].value.shape()[1];
                let scale = g[0] / *count as f64;
                let mut dl = probs.clone();
                for (row, &t) in dl.chunks_exact_mut(v).zip(targets) {
                    if t == IGNORE {
                        continue;
                    }
                    row[t as usize] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Reshape { a } => self.accumulate(grads, *a, g.to_vec()),
            Op::Transpose { a, d0, d1 } => {
                let (out, _) = kernels::swap_axes(g, node.value.shape(), *d0, *d1);
                self.accumulate(grads, *a, out);
            }
            Op::Sum { a } => {
                let n = self.nodes[a.idx].value.numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::WeightedSqDist { x, dx } => {
                self.accumulate(grads, *x, dx.iter().map(|d| d * g[0]).collect());
            }
        }
    }
}
