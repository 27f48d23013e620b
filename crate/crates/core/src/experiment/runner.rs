use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, StageSpec};
use super::ledger::{LedgerEntry, RunLedger};
use crate::continual::{
    fisher_from_batches, fisher_samples, make_no_fisher_penalty, replay_plan, StrategyConfig, StrategyKind,
    TaskPenalty, Trainer,
};
use crate::data::synth::generate;
use crate::data::{batch_iter, mixed_iter, read_text, AccessLog, Corpus, ReplayBuffer, TokenBatch, Vocabulary};
use crate::error::{CalmError, Result};
use crate::eval::{emit_report, perplexity, Checkpoint, MetricsReport, RunStrategy, StageStrategy};
use crate::model::{MaskedLm, MlmModel};
use crate::rng::derive_seed;

pub const REPORT_FILE: &str = "report.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";
const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the stages completed in `output_dir`, if any.
    pub resume: bool,
    /// Stop once this many stages are complete, without writing the report.
    pub stop_after: Option<usize>,
    /// Receives a record of every corpus read, labelled by phase.
    pub audit: Option<AccessLog>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// Resume point written after every completed stage.
#[derive(Serialize, Deserialize)]
struct RunState {
    fingerprint: String,
    completed: usize,
    steps: usize,
    report: MetricsReport,
}

struct Domain {
    id: String,
    train: Corpus,
    test: Corpus,
}

/// Everything that determines the outcome of the first `stages` stages.
fn fingerprint(cfg: &ExperimentConfig, stages: usize) -> String {
    serde_json::to_string(&(&cfg.seed, &cfg.model, &cfg.domains, &cfg.eval, &cfg.stages[..stages])).expect("serializes")
}

pub fn checkpoint_label(stage: &StageSpec) -> String {
    format!("after {}", stage.name)
}

fn strategy_label(s: &StrategyConfig) -> String {
    match s.kind {
        StrategyKind::Ewc => format!("ewc(lambda={}, fisher={})", s.ewc.lambda_weight, s.ewc.fisher_fraction),
        StrategyKind::EwcNoFisher => format!("ewc_no_fisher(lambda={})", s.ewc.lambda_weight),
        StrategyKind::Er => {
            let mode = serde_json::to_value(s.er.mode).expect("serializes");
            format!("er({}, {})", mode.as_str().unwrap_or_default(), s.er.buffer_fraction)
        }
        k => k.name().to_string(),
    }
}

pub fn run_strategy(cfg: &ExperimentConfig) -> RunStrategy {
    RunStrategy {
        label: cfg.stages.iter().map(|s| strategy_label(&s.strategy)).collect::<Vec<_>>().join(" -> "),
        stages: cfg
            .stages
            .iter()
            .map(|s| StageStrategy {
                stage: s.name.clone(),
                train_domains: s.train_domains.clone(),
                strategy: s.strategy.clone(),
            })
            .collect(),
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    out: PathBuf,
    audit: AccessLog,
    domains: Vec<Domain>,
    ledger: RunLedger,
    report: MetricsReport,
    steps: usize,
}

/// Runs every stage of `cfg` and writes the report, ledger and checkpoints
/// to its output directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<MetricsReport> {
    cfg.check()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CalmError::io(&out, e))?;
    let audit = opts.audit.clone().unwrap_or_default();
    audit.set_phase("load");
    let (vocab, domains) = load_domains(cfg, &audit)?;
    vocab.save(&out.join("vocab.txt"))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| CalmError::io(out.join("config.toml"), e))?;

    let state_path = out.join(STATE_FILE);
    let resumed = if opts.resume && state_path.exists() { Some(read_state(&state_path)?) } else { None };
    let (mut model, completed, ledger, report, steps) = match resumed {
        Some(state) => {
            if state.completed > cfg.stages.len() || fingerprint(cfg, state.completed) != state.fingerprint {
                return Err(CalmError::contract(format!(
                    "{} was written by a different configuration; remove it or run without resume",
                    state_path.display()
                )));
            }
            let model = if state.completed == 0 {
                MlmModel::new(cfg.model.with_vocab(vocab.len(), cfg.seed))?
            } else {
                MlmModel::load(&stage_ckpt(&out, state.completed - 1))?
            };
            let mut report = state.report;
            report.run_id = cfg.run_id.clone();
            report.strategy = run_strategy(cfg);
            let ledger = RunLedger::resume(&out.join(LEDGER_FILE), state.completed)?;
            (model, state.completed, ledger, report, state.steps)
        }
        None => {
            let model = MlmModel::new(cfg.model.with_vocab(vocab.len(), cfg.seed))?;
            let ledger = RunLedger::create(&out.join(LEDGER_FILE))?;
            (model, 0, ledger, MetricsReport::new(&cfg.run_id, run_strategy(cfg)), 0)
        }
    };
    let mut runner = Runner { cfg, opts, out, audit, domains, ledger, report, steps };
    if completed == 0 && runner.report.checkpoints.is_empty() {
        runner.evaluate(&model, "init")?;
        runner.save_state(0)?;
    }
    for k in completed..cfg.stages.len() {
        if opts.stop_after.is_some_and(|s| k >= s) {
            runner.ledger.flush()?;
            return Ok(runner.report);
        }
        let result = runner.stage(k, &mut model);
        runner.ledger.flush()?;
        result?;
    }
    emit_report(&runner.report, &runner.out.join(REPORT_FILE))?;
    Ok(runner.report)
}

fn read_state(path: &Path) -> Result<RunState> {
    let text = std::fs::read_to_string(path).map_err(|e| CalmError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CalmError::format("run state", e))
}

fn stage_ckpt(out: &Path, k: usize) -> PathBuf {
    out.join(format!("stage_{k}.ckpt"))
}

fn load_domains(cfg: &ExperimentConfig, audit: &AccessLog) -> Result<(Arc<Vocabulary>, Vec<Domain>)> {
    let mut texts = Vec::with_capacity(cfg.domains.len());
    for d in &cfg.domains {
        texts.push(match (&d.path, d.synth) {
            (Some(path), _) => read_text(path)?,
            (None, Some(kind)) => generate(kind, d.synth_bytes, d.synth_seed),
            (None, None) => unreachable!("validated"),
        });
    }
    let vocab = Arc::new(Vocabulary::from_texts(texts.iter().map(String::as_str)));
    let mut domains = Vec::with_capacity(texts.len());
    for (d, text) in cfg.domains.iter().zip(&texts) {
        let corpus = Corpus::from_text(text, &d.id, vocab.clone())?;
        let (train, _valid, test) = corpus.split(derive_seed(cfg.seed, &format!("split:{}", d.id)))?;
        domains.push(Domain {
            id: d.id.clone(),
            train: train.with_audit(audit.clone()),
            test: test.with_audit(audit.clone()),
        });
    }
    Ok((vocab, domains))
}

impl Runner<'_> {
    fn log(&self, msg: impl AsRef<str>) {
        if self.opts.verbose {
            eprintln!("[{}] {}", self.cfg.run_id, msg.as_ref());
        }
    }

    fn domain(&self, id: &str) -> &Domain {
        self.domains.iter().find(|d| d.id == id).expect("validated domain")
    }

    fn evaluate(&mut self, model: &MlmModel, label: &str) -> Result<()> {
        self.audit.set_phase(format!("eval:{label}"));
        let seq_len = self.cfg.eval_seq_len();
        let mut results = Vec::with_capacity(self.domains.len());
        for d in &self.domains {
            let seed = derive_seed(self.cfg.eval.eval_seed, &format!("eval:{}", d.id));
            results.push(perplexity(model, &d.test, seq_len, self.cfg.eval.mask_prob, seed)?);
        }
        let summary: Vec<String> = results.iter().map(|r| format!("{}={:.3}", r.domain_id, r.perplexity)).collect();
        self.log(format!("{label}: ppl {}", summary.join(" ")));
        self.report.push_checkpoint(Checkpoint { label: label.to_string(), step: self.steps, domains: results })
    }

    fn save_state(&self, completed: usize) -> Result<()> {
        let state = RunState {
            fingerprint: fingerprint(self.cfg, completed),
            completed,
            steps: self.steps,
            report: self.report.clone(),
        };
        let path = self.out.join(STATE_FILE);
        let text = serde_json::to_string_pretty(&state).expect("state serializes");
        std::fs::write(&path, text).map_err(|e| CalmError::io(&path, e))
    }

    fn stage(&mut self, k: usize, model: &mut MlmModel) -> Result<()> {
        let cfg = self.cfg;
        let stage = &cfg.stages[k];
        let strategy = &stage.strategy;
        let (b, l) = (stage.batch_size, stage.seq_len);

        let penalties = if strategy.kind.uses_penalty() { self.penalties(k, model)? } else { Vec::new() };
        let (buffer, source_windows) = if strategy.kind == StrategyKind::Er {
            let (buf, w) = self.fill_buffer(k)?;
            (Some(buf), w)
        } else {
            (None, 0)
        };

        let domains = &self.domains;
        let train: Vec<&Corpus> = stage
            .train_domains
            .iter()
            .map(|d| &domains.iter().find(|x| &x.id == d).expect("validated domain").train)
            .collect();
        let epoch_len: usize = train.iter().map(|c| c.window_count(l) / b).sum();
        if epoch_len == 0 {
            return Err(CalmError::InsufficientData(format!(
                "stage `{}` has less than one batch per epoch",
                stage.name
            )));
        }
        let total = stage.max_steps.map_or(stage.epochs * epoch_len, |m| m.min(stage.epochs * epoch_len));
        let schedule = stage.schedule.build(total);
        let plan = match strategy.kind {
            StrategyKind::Er => replay_plan(&strategy.er, epoch_len, source_windows, b),
            _ => Vec::new(),
        };
        let mut trainer = Trainer::new(model.params(), strategy.clone(), schedule, stage.adam, epoch_len, plan)?;
        let weights: Vec<f64> = if strategy.mdl.weights.is_empty() {
            vec![1.0 / train.len() as f64; train.len()]
        } else {
            let sum: f64 = strategy.mdl.weights.iter().sum();
            strategy.mdl.weights.iter().map(|w| w / sum).collect()
        };

        let phase = format!("train:{}", stage.name);
        self.audit.set_phase(&phase);
        let audit_mark = self.audit.records().len();
        self.log(format!("stage {} ({}): {total} steps", stage.name, strategy_label(strategy)));
        let report_every = (total / 10).max(1);
        'epochs: for epoch in 0..stage.epochs {
            let seed = derive_seed(cfg.seed, &format!("stage:{}:epoch:{epoch}", stage.name));
            let batches: Box<dyn Iterator<Item = TokenBatch>> = if train.len() == 1 {
                Box::new(batch_iter(train[0], b, l, seed, stage.mask_prob)?)
            } else {
                Box::new(mixed_iter(&train, &weights, b, l, seed, stage.mask_prob)?.take(epoch_len))
            };
            for batch in batches {
                if trainer.steps_done() >= total {
                    break 'epochs;
                }
                let entry = match trainer.continual_step(model, &batch, &penalties, buffer.as_ref()) {
                    Ok(m) => {
                        if m.step % report_every == 0 {
                            self.log(format!(
                                "  step {}/{total} loss {:.4} penalty {:.4} lr {:.2e}",
                                m.step, m.loss, m.penalty_value, m.lr
                            ));
                        }
                        LedgerEntry::Step {
                            stage_index: k,
                            stage: stage.name.clone(),
                            step: m.step,
                            loss: m.loss,
                            penalty: m.penalty_value,
                            lr: m.lr,
                            replayed: m.replayed_batches,
                        }
                    }
                    Err(CalmError::EmptyLoss) => {
                        let replayed = trainer.skip_step(model, buffer.as_ref())?;
                        LedgerEntry::Skip {
                            stage_index: k,
                            stage: stage.name.clone(),
                            step: trainer.steps_done(),
                            replayed,
                        }
                    }
                    Err(e) => return Err(e),
                };
                self.ledger.append(&entry)?;
            }
        }
        self.check_isolation(&phase, audit_mark, stage)?;
        self.steps += trainer.steps_done();

        let ckpt = stage_ckpt(&self.out, k);
        model.save(&ckpt)?;
        self.ledger.append(&LedgerEntry::Checkpoint {
            stage_index: k,
            stage: stage.name.clone(),
            step: self.steps,
            file: file_name(&ckpt),
        })?;
        let label = checkpoint_label(stage);
        self.evaluate(model, &label)?;
        for d in &self.domains {
            if stage.train_domains.contains(&d.id) {
                continue;
            }
            if let Some(last) = cfg.stages[..k].iter().rev().find(|s| s.train_domains.contains(&d.id)) {
                self.report.add_delta(&checkpoint_label(last), &label, &d.id)?;
            }
        }
        self.save_state(k + 1)
    }

    /// Training of a stage may only read its own domains' training splits.
    fn check_isolation(&self, phase: &str, mark: usize, stage: &StageSpec) -> Result<()> {
        let records = self.audit.records();
        for r in records.iter().skip(mark).filter(|r| r.phase == phase) {
            if r.split != "train" || !stage.train_domains.contains(&r.domain_id) {
                return Err(CalmError::contract(format!(
                    "stage `{}` read the {} split of `{}` during training",
                    stage.name, r.split, r.domain_id
                )));
            }
        }
        Ok(())
    }

    /// Penalties for EWC stage `j`: one per earlier stage when accumulating,
    /// otherwise only for the stage just finished. Each is anchored at the
    /// model saved after its stage.
    fn penalties(&mut self, j: usize, current: &mut MlmModel) -> Result<Vec<TaskPenalty>> {
        let stage = &self.cfg.stages[j];
        let ewc = &stage.strategy.ewc;
        let tasks: Vec<usize> = if ewc.accumulate { (0..j).collect() } else { vec![j - 1] };
        let mut out = Vec::with_capacity(tasks.len());
        for k in tasks {
            let task = &self.cfg.stages[k];
            let mut stored;
            let model: &mut MlmModel = if k + 1 == j {
                current
            } else {
                stored = MlmModel::load(&stage_ckpt(&self.out, k))?;
                &mut stored
            };
            let penalty = match stage.strategy.kind {
                StrategyKind::Ewc => {
                    self.audit.set_phase(format!("fisher:{}", task.name));
                    let mut samples = Vec::new();
                    for d in &task.train_domains {
                        let seed = derive_seed(self.cfg.seed, &format!("fisher:{}:{d}", task.name));
                        let corpus = &self.domain(d).train;
                        samples.extend(fisher_samples(
                            corpus,
                            ewc.fisher_fraction,
                            task.seq_len,
                            task.mask_prob,
                            seed,
                        )?);
                    }
                    let fisher = fisher_from_batches(model, &samples)?;
                    TaskPenalty::new(&task.name, fisher, model.snapshot(), ewc.lambda_weight)?
                }
                _ => make_no_fisher_penalty(&task.name, model.snapshot(), ewc.lambda_weight)?,
            };
            let path = self.out.join(format!("penalty_{j}_{k}.ckpt"));
            penalty.save(&path)?;
            self.ledger.append(&LedgerEntry::Penalty {
                stage_index: j,
                stage: stage.name.clone(),
                task: task.name.clone(),
                lambda_weight: penalty.lambda_weight,
                samples: penalty.fisher.sample_count(),
                file: file_name(&path),
            })?;
            self.log(format!("penalty on stage {} from {} samples", task.name, penalty.fisher.sample_count()));
            out.push(penalty);
        }
        Ok(out)
    }

    /// Replay buffer for stage `j` from the previous stage's training data,
    /// and the source window count.
    fn fill_buffer(&mut self, j: usize) -> Result<(ReplayBuffer, usize)> {
        let stage = &self.cfg.stages[j];
        let prev = &self.cfg.stages[j - 1];
        let source_id = &prev.train_domains[0];
        self.audit.set_phase(format!("replay-fill:{}", prev.name));
        let source = &self.domain(source_id).train;
        let (b, l) = (stage.batch_size, stage.seq_len);
        let windows = source.window_count(l);
        let capacity = stage.strategy.er.buffer_batches(windows, b);
        let mut buffer = ReplayBuffer::new(capacity);
        let seed = derive_seed(self.cfg.seed, &format!("replay:{}", stage.name));
        let batches = batch_iter(source, b, l, seed, stage.mask_prob)?.filter(|x| x.target_count() > 0);
        buffer.fill(batches, capacity)?;
        for d in &stage.train_domains {
            buffer.check_disjoint_from(d)?;
        }
        self.ledger.append(&LedgerEntry::ReplayFill {
            stage_index: j,
            stage: stage.name.clone(),
            source: source_id.clone(),
            batches: buffer.len(),
        })?;
        Ok((buffer, windows))
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
