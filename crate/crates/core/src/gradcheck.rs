//! Central finite differences, used as an independent check on the tape.

use crate::tensor::{ParamSet, Tensor};

/// Gradients of `f` with respect to every parameter by central differences.
///
/// `f` is evaluated `2 * params.numel()` times; parameter values are
/// restored exactly afterwards.
pub fn numeric_grads<F>(params: &mut ParamSet, step: f64, mut f: F) -> Vec<Tensor>
where
    F: FnMut(&ParamSet) -> f64,
{
    let ids: Vec<_> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).value.numel();
        let mut g = Tensor::zeros(params.get(id).value.shape().to_vec());
        for i in 0..n {
            let orig = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + step;
            let up = f(params);
            params.get_mut(id).value.data_mut()[i] = orig - step;
            let down = f(params);
            params.get_mut(id).value.data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)` over a list of tensors.
///
/// Returns 0 when both sides are exactly zero.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(b.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    let denom = f64::max(na, nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Analytic gradients currently held in `params`, in parameter order.
pub fn analytic_grads(params: &ParamSet) -> Vec<Tensor> {
    params.iter().map(|p| p.grad.clone()).collect()
}
