use serde::{Deserialize, Serialize};

use super::{ewc_penalty, ReplayLr, StrategyConfig, StrategyKind, TaskPenalty};
use crate::data::{ReplayBuffer, TokenBatch};
use crate::error::{CalmError, Result};
use crate::model::MaskedLm;
use crate::optim::{AdamConfig, AdamState, TrainingSchedule};
use crate::tensor::Tape;

/// What one training step did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based step index within the stage.
    pub step: usize,
    /// Masked-LM loss of the batch, before any penalty.
    pub loss: f64,
    pub penalty_value: f64,
    /// Base learning rate used for the update.
    pub lr: f64,
    pub replayed_batches: usize,
}

/// Strategy-aware training loop state for one stage.
#[derive(Debug, Clone)]
pub struct Trainer {
    strategy: StrategyConfig,
    schedule: TrainingSchedule,
    optimizer: AdamState,
    epoch_len: usize,
    plan: Vec<(usize, usize)>,
    step: usize,
    replay_cursor: usize,
}

impl Trainer {
    /// `plan` lists replay events per epoch as from [`super::replay_plan`];
    /// it must be empty unless the strategy is replay.
    pub fn new(
        params: &crate::tensor::ParamSet,
        strategy: StrategyConfig,
        schedule: TrainingSchedule,
        adam: AdamConfig,
        epoch_len: usize,
        plan: Vec<(usize, usize)>,
    ) -> Result<Self> {
        schedule.validate()?;
        if epoch_len == 0 {
            return Err(CalmError::contract("epoch length must be positive"));
        }
        if !plan.is_empty() && strategy.kind != StrategyKind::Er {
            return Err(CalmError::contract(format!("strategy {} takes no replay plan", strategy.kind.name())));
        }
        Ok(Self {
            strategy,
            schedule,
            optimizer: AdamState::new(params, adam),
            epoch_len,
            plan,
            step: 0,
            replay_cursor: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &TrainingSchedule {
        &self.schedule
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    fn check_state(&self, penalties: &[TaskPenalty], buffer: Option<&ReplayBuffer>) -> Result<()> {
        let kind = self.strategy.kind;
        if kind.uses_penalty() && penalties.is_empty() {
            return Err(CalmError::contract(format!("strategy {} needs task penalties", kind.name())));
        }
        if !kind.uses_penalty() && !penalties.is_empty() {
            return Err(CalmError::contract(format!("strategy {} takes no task penalties", kind.name())));
        }
        if kind == StrategyKind::Er && buffer.is_none_or(ReplayBuffer::is_empty) {
            return Err(CalmError::contract("strategy er needs a non-empty replay buffer"));
        }
        Ok(())
    }

    /// One optimizer step on `batch` (plus the EWC penalty where the
    /// strategy has one), followed by any replay updates scheduled at the
    /// new step count.
    ///
    /// A batch without targets fails with [`CalmError::EmptyLoss`] and
    /// changes nothing; pass it to [`Trainer::skip_step`] to keep the
    /// step count aligned.
    pub fn continual_step<M: MaskedLm>(
        &mut self,
        model: &mut M,
        batch: &TokenBatch,
        penalties: &[TaskPenalty],
        buffer: Option<&ReplayBuffer>,
    ) -> Result<StepMetrics> {
        self.check_state(penalties, buffer)?;
        if self.step >= self.schedule.total_steps {
            return Err(CalmError::contract(format!("schedule of {} steps is exhausted", self.schedule.total_steps)));
        }
        let lr = self.schedule.lr_at(self.step)?;
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, batch)?;
        let loss_value = tape.value(loss).item()?;
        let (objective, penalty_value) = if self.strategy.kind.uses_penalty() {
            let pen = ewc_penalty(&mut tape, penalties, model.params())?;
            let value = tape.value(pen).item()?;
            (tape.add(loss, pen)?, value)
        } else {
            (loss, 0.0)
        };
        let params = model.params_mut();
        params.zero_grads();
        tape.backward(objective, params)?;
        let top = params.max_layer_group();
        let schedule = self.schedule;
        self.optimizer.update(params, |g| schedule.layer_lr(lr, g, top))?;
        self.step += 1;
        let replayed = self.replay_due(model, buffer)?;
        Ok(StepMetrics { step: self.step, loss: loss_value, penalty_value, lr, replayed_batches: replayed })
    }

    /// Advance past a batch that could not be trained on, still running any
    /// replay due at the new step count.
    pub fn skip_step<M: MaskedLm>(&mut self, model: &mut M, buffer: Option<&ReplayBuffer>) -> Result<usize> {
        if self.step >= self.schedule.total_steps {
            return Err(CalmError::contract(format!("schedule of {} steps is exhausted", self.schedule.total_steps)));
        }
        self.step += 1;
        self.replay_due(model, buffer)
    }

    fn replay_due<M: MaskedLm>(&mut self, model: &mut M, buffer: Option<&ReplayBuffer>) -> Result<usize> {
        if self.plan.is_empty() {
            return Ok(0);
        }
        let local = (self.step - 1) % self.epoch_len + 1;
        let count: usize = self.plan.iter().filter(|(s, _)| *s == local).map(|(_, n)| n).sum();
        if count == 0 {
            return Ok(0);
        }
        let buffer =
            buffer.filter(|b| !b.is_empty()).ok_or_else(|| CalmError::contract("replay event without a buffer"))?;
        let lr = match self.strategy.er.lr {
            ReplayLr::Current => self.schedule.lr_at(self.step)?,
            ReplayLr::Peak => self.schedule.base_lr,
        };
        let schedule = self.schedule;
        let mut replayed = 0;
        for _ in 0..count {
            let batch = buffer.get(self.replay_cursor % buffer.len()).expect("index in range");
            self.replay_cursor += 1;
            let mut tape = Tape::new();
            let loss = match model.loss(&mut tape, batch) {
                Ok(l) => l,
                Err(CalmError::EmptyLoss) => continue,
                Err(e) => return Err(e),
            };
            let params = model.params_mut();
            params.zero_grads();
            tape.backward(loss, params)?;
            let top = params.max_layer_group();
            self.optimizer.update(params, |g| schedule.layer_lr(lr, g, top))?;
            replayed += 1;
        }
        Ok(replayed)
    }
}
