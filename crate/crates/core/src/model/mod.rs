//! The masked-LM transformer and its checkpoint format.

pub mod checkpoint;
mod mlm;

pub use checkpoint::{Container, ContainerKind};
pub use mlm::{MlmModel, ModelConfig, Snapshot};

use crate::data::TokenBatch;
use crate::error::Result;
use crate::tensor::{ParamSet, Tape, Var};

/// Anything trainable with a masked-LM style objective.
///
/// Training, Fisher estimation and evaluation are written against this so
/// they can be checked on small hand-analyzable models.
pub trait MaskedLm {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Scalar loss of `batch` recorded on `tape`.
    fn loss(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Var>;

    /// Summed negative log-likelihood over the batch's targets, and the
    /// target count. No gradients are kept.
    fn masked_nll(&self, batch: &TokenBatch) -> Result<(f64, usize)> {
        let count = batch.target_count();
        if count == 0 {
            return Ok((0.0, 0));
        }
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, batch)?;
        Ok((tape.value(loss).item()? * count as f64, count))
    }
}
