use std::collections::BTreeMap;
use std::sync::Arc;

use calm_core::continual::{
    compute_fisher, ewc_penalty, fisher_from_batches, fisher_samples, make_no_fisher_penalty, replay_plan,
    FisherDiagonal, ReplayConfig, ReplayMode, StrategyConfig, StrategyKind, TaskPenalty, Trainer,
};
use calm_core::data::synth::{generate, SynthDomain};
use calm_core::data::{batch_iter, Corpus, ReplayBuffer, TokenBatch, Vocabulary};
use calm_core::gradcheck::{analytic_grads, numeric_grads, relative_error};
use calm_core::model::{MaskedLm, MlmModel, ModelConfig, Snapshot};
use calm_core::optim::{AdamConfig, TrainingSchedule};
use calm_core::rng::substream;
use calm_core::{CalmError, ParamSet, Parameter, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

/// `0.5 * (w . x - y)^2` with `x` and `y` read off the batch; the gradient
/// `(w . x - y) * x` is written out by hand in [`LinearToy::grad`].
struct LinearToy {
    params: ParamSet,
}

impl LinearToy {
    fn new(w: [f64; 3]) -> Self {
        let mut params = ParamSet::new();
        params.add(Parameter::new("w", Tensor::from_vec(w.to_vec()), 0)).unwrap();
        Self { params }
    }

    fn features(batch: &TokenBatch) -> ([f64; 3], f64) {
        let x = [0, 1, 2].map(|i| batch.inputs[i] as f64 / 10.0 - 0.5);
        let y = batch.targets.iter().copied().find(|&t| t >= 0).unwrap() as f64 / 7.0;
        (x, y)
    }

    fn grad(&self, batch: &TokenBatch) -> [f64; 3] {
        let w = self.params.by_name("w").unwrap().value.data();
        let (x, y) = Self::features(batch);
        let r = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] - y;
        x.map(|xi| r * xi)
    }
}

impl MaskedLm for LinearToy {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn loss(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Var> {
        if batch.target_count() == 0 {
            return Err(CalmError::EmptyLoss);
        }
        let (x, y) = Self::features(batch);
        let w = tape.param(&self.params, self.params.id_of("w").unwrap());
        let xv = tape.constant(Tensor::from_vec(x.to_vec()));
        let prod = tape.mul(w, xv)?;
        let s = tape.sum(prod);
        let neg_y = tape.constant(Tensor::scalar(-y));
        let r = tape.add(s, neg_y)?;
        let sq = tape.mul(r, r)?;
        Ok(tape.scale(sq, 0.5))
    }
}

/// `w * (first input - 4)` plus an unused parameter.
struct ScalarToy {
    params: ParamSet,
}

impl ScalarToy {
    fn new() -> Self {
        let mut params = ParamSet::new();
        params.add(Parameter::new("w", Tensor::from_vec(vec![0.3]), 0)).unwrap();
        params.add(Parameter::new("unused", Tensor::from_vec(vec![1.0, 2.0]), 0)).unwrap();
        Self { params }
    }
}

impl MaskedLm for ScalarToy {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn loss(&self, tape: &mut Tape, batch: &TokenBatch) -> Result<Var> {
        let w = tape.param(&self.params, self.params.id_of("w").unwrap());
        let _ = tape.param(&self.params, self.params.id_of("unused").unwrap());
        let c = tape.constant(Tensor::from_vec(vec![batch.inputs[0] as f64 - 4.0]));
        let p = tape.mul(w, c)?;
        Ok(tape.sum(p))
    }
}

fn one_window(inputs: Vec<u32>, target: i64) -> TokenBatch {
    let n = inputs.len();
    let mut targets = vec![-1; n];
    targets[n - 1] = target;
    TokenBatch { inputs, targets, batch_size: 1, seq_len: n, domain_id: "toy".into() }
}

fn random_windows(n: usize, seq_len: usize, vocab: u32, seed: u64) -> Vec<TokenBatch> {
    let mut rng = substream(seed, "toy-windows");
    (0..n)
        .map(|_| {
            let inputs: Vec<u32> = (0..seq_len).map(|_| rng.random_range(3..vocab)).collect();
            let t = rng.random_range(3..vocab) as i64;
            one_window(inputs, t)
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

#[test]
fn fisher_of_two_scalar_gradients() {
    let mut toy = ScalarToy::new();
    let batches = vec![one_window(vec![5], 3), one_window(vec![1], 3)];
    let f = fisher_from_batches(&mut toy, &batches).unwrap();
    assert_eq!(f.sample_count(), 2);
    assert_eq!(f.get("w").unwrap().data(), &[5.0]);
    assert_eq!(f.get("unused").unwrap().data(), &[0.0, 0.0]);
    assert!(toy.params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
}

#[test]
fn fisher_matches_hand_derived_linear_oracle() {
    let mut toy = LinearToy::new([0.4, -1.1, 0.7]);
    let batches = random_windows(8, 3, 12, 1);
    let mut oracle = [0.0; 3];
    for b in &batches {
        let g = toy.grad(b);
        for i in 0..3 {
            oracle[i] += g[i] * g[i];
        }
    }
    let oracle = oracle.map(|s| s / 8.0);
    let f = fisher_from_batches(&mut toy, &batches).unwrap();
    for (a, b) in f.get("w").unwrap().data().iter().zip(oracle) {
        assert!(rel(*a, b) <= 1e-12, "{a} vs {b}");
    }
}

fn tiny_model(vocab: usize) -> MlmModel {
    MlmModel::new(ModelConfig {
        vocab_size: vocab,
        d_model: 2,
        n_heads: 1,
        n_layers: 1,
        d_ff: 2,
        max_seq_len: 2,
        seed: 4,
    })
    .unwrap()
}

fn brute_force_fisher(model: &MlmModel, batches: &[TokenBatch]) -> BTreeMap<String, Vec<f64>> {
    let mut params = model.params().clone();
    let mut sums: BTreeMap<String, Vec<f64>> =
        params.iter().map(|p| (p.name.clone(), vec![0.0; p.value.numel()])).collect();
    for b in batches {
        params.zero_grads();
        let mut tape = Tape::new();
        let loss = model.mlm_loss(&mut tape, b).unwrap();
        tape.backward(loss, &mut params).unwrap();
        for p in params.iter() {
            for (s, g) in sums.get_mut(&p.name).unwrap().iter_mut().zip(p.grad.data()) {
                *s += g * g;
            }
        }
    }
    for v in sums.values_mut() {
        v.iter_mut().for_each(|x| *x /= batches.len() as f64);
    }
    sums
}

#[test]
fn fisher_matches_brute_force_on_tiny_transformer() {
    let mut model = tiny_model(4);
    assert!(model.params().numel() <= 100, "{}", model.params().numel());
    let batches = random_windows(37, 2, 4, 2);
    let oracle = brute_force_fisher(&model, &batches);
    let f = fisher_from_batches(&mut model, &batches).unwrap();
    assert_eq!(f.len(), oracle.len());
    for (name, want) in &oracle {
        for (a, b) in f.get(name).unwrap().data().iter().zip(want) {
            assert!(rel(*a, *b) <= 1e-12, "{name}: {a} vs {b}");
            assert!(*a >= 0.0);
        }
    }
}

#[test]
fn compute_fisher_samples_ceil_fraction_of_windows() {
    let text = generate(SynthDomain::Prose, 6_000, 1);
    let vocab = Arc::new(Vocabulary::from_texts([text.as_str()]));
    let corpus = Corpus::from_text(&text, "a", vocab.clone()).unwrap();
    let windows = corpus.window_count(16);
    let samples = fisher_samples(&corpus, 0.01, 16, 0.15, 3).unwrap();
    assert_eq!(samples.len(), (0.01 * windows as f64).ceil() as usize);
    assert!(samples.iter().all(|s| s.batch_size == 1 && s.target_count() > 0));
    let again = fisher_samples(&corpus, 0.01, 16, 0.15, 3).unwrap();
    assert_eq!(samples, again);

    let mut model = MlmModel::new(ModelConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 8,
        max_seq_len: 16,
        seed: 1,
    })
    .unwrap();
    let f = compute_fisher(&mut model, &corpus, 0.01, 16, 0.15, 3).unwrap();
    let g = fisher_from_batches(&mut model, &samples).unwrap();
    assert_eq!(f, g);
    assert!(matches!(compute_fisher(&mut model, &corpus, 0.0, 16, 0.15, 3), Err(CalmError::Contract(_))));
    assert!(fisher_from_batches(&mut model, &[]).is_err());
}

fn five_params(values: &[f64]) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.add(Parameter::new("a", Tensor::from_vec(values[..2].to_vec()), 0)).unwrap();
    ps.add(Parameter::new("b", Tensor::new(vec![3], values[2..5].to_vec()).unwrap(), 1)).unwrap();
    ps
}

fn penalty_for(ps: &ParamSet, fisher: &[f64], anchor: &[f64], lambda: f64) -> TaskPenalty {
    let fisher_map = BTreeMap::from([
        ("a".to_string(), Tensor::from_vec(fisher[..2].to_vec())),
        ("b".to_string(), Tensor::from_vec(fisher[2..5].to_vec())),
    ]);
    let anchor_ps = five_params(anchor);
    assert_eq!(anchor_ps.len(), ps.len());
    TaskPenalty::new("t", FisherDiagonal::new(fisher_map, 3).unwrap(), Snapshot::of(&anchor_ps), lambda).unwrap()
}

fn penalty_value(pens: &[TaskPenalty], ps: &ParamSet) -> f64 {
    let mut tape = Tape::new();
    let v = ewc_penalty(&mut tape, pens, ps).unwrap();
    tape.value(v).item().unwrap()
}

#[test]
fn penalty_hand_values() {
    let theta = [0.5, 0.0, 0.0, 0.0, 0.0];
    let ps = five_params(&theta);
    let at_anchor = penalty_for(&ps, &[2.0, 1.0, 1.0, 1.0, 1.0], &theta, 1.0);
    assert_eq!(penalty_value(&[at_anchor], &ps), 0.0);
    let pen = penalty_for(&ps, &[2.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 5], 1.0);
    assert_eq!(penalty_value(std::slice::from_ref(&pen), &ps), 0.5);
    assert_eq!(pen.value(&ps).unwrap(), 0.5);
}

#[test]
fn no_fisher_penalty_is_plain_l2() {
    let ps = five_params(&[1.0, 2.0, 0.0, 0.0, 0.0]);
    let anchor = Snapshot::of(&five_params(&[0.0; 5]));
    let pen = make_no_fisher_penalty("t", anchor.clone(), 1.0).unwrap();
    assert!(pen.fisher.iter().all(|(_, t)| t.data().iter().all(|&v| v == 1.0)));
    assert_eq!(penalty_value(&[pen], &ps), 5.0);

    let theta = [0.3, -1.2, 2.0, 0.1, -0.7];
    let ps = five_params(&theta);
    let unit = penalty_for(&ps, &[1.0; 5], &[0.0; 5], 2.5);
    let nf = make_no_fisher_penalty("t", anchor, 2.5).unwrap();
    let l2: f64 = theta.iter().map(|x| x * x).sum::<f64>() * 2.5;
    assert_eq!(penalty_value(std::slice::from_ref(&nf), &ps), penalty_value(&[unit], &ps));
    assert!((penalty_value(&[nf], &ps) - l2).abs() < 1e-14);
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    let mut rng = substream(99, "ewc-draws");
    for _ in 0..25 {
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..5).map(|_| rng.random_range(lo..hi)).collect() };
        let theta = draw(-2.0, 2.0);
        let anchor = draw(-2.0, 2.0);
        let fisher = draw(0.0, 3.0);
        let lambda = rng.random_range(0.1..10.0);
        let mut ps = five_params(&theta);
        let pen = penalty_for(&ps, &fisher, &anchor, lambda);
        let mut tape = Tape::new();
        let v = ewc_penalty(&mut tape, std::slice::from_ref(&pen), &ps).unwrap();
        ps.zero_grads();
        tape.backward(v, &mut ps).unwrap();
        let analytic = analytic_grads(&ps);
        // closed form 2 * lambda * F * (theta - anchor)
        let closed: Vec<f64> = (0..5).map(|i| 2.0 * lambda * fisher[i] * (theta[i] - anchor[i])).collect();
        let flat: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
        for (a, b) in flat.iter().zip(&closed) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let numeric = numeric_grads(&mut ps, 1e-5, |p| pen.value(p).unwrap());
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn penalties_add_across_tasks() {
    let ps = five_params(&[0.3, -1.2, 2.0, 0.1, -0.7]);
    let p1 = penalty_for(&ps, &[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5], 0.5);
    let p2 = penalty_for(&ps, &[0.5; 5], &[1.0, 1.0, -1.0, 0.0, 2.0], 3.0);
    let both = penalty_value(&[p1.clone(), p2.clone()], &ps);
    let sum = penalty_value(&[p1], &ps) + penalty_value(&[p2], &ps);
    assert!((both - sum).abs() <= 1e-12 * sum);
}

#[test]
fn penalty_shape_mismatch_is_a_contract_error() {
    let ps = five_params(&[0.0; 5]);
    let pen = penalty_for(&ps, &[1.0; 5], &[0.0; 5], 1.0);
    let mut other = ParamSet::new();
    other.add(Parameter::new("a", Tensor::from_vec(vec![0.0; 3]), 0)).unwrap();
    other.add(Parameter::new("b", Tensor::from_vec(vec![0.0; 3]), 0)).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(ewc_penalty(&mut tape, &[pen], &other), Err(CalmError::Contract(_))));
    assert!(matches!(ewc_penalty(&mut tape, &[], &ps), Err(CalmError::Contract(_))));
    assert!(
        TaskPenalty::new("t", FisherDiagonal::ones_like(Snapshot::of(&ps).iter()), Snapshot::of(&ps), -1.0).is_err()
    );
}

#[test]
fn penalty_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("penalty_1.ckpt");
    let ps = five_params(&[0.3, -1.2, 2.0, 0.1, -0.7]);
    let pen = penalty_for(&ps, &[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0, 1.0, 2.0, 3.0, 4.0], 0.5);
    pen.save(&path).unwrap();
    assert_eq!(TaskPenalty::load(&path).unwrap(), pen);
    MlmModel::new(ModelConfig { vocab_size: 5, d_model: 2, n_heads: 1, n_layers: 1, d_ff: 2, max_seq_len: 2, seed: 0 })
        .unwrap()
        .save(&path)
        .unwrap();
    assert!(matches!(TaskPenalty::load(&path), Err(CalmError::IncompatibleCheckpoint(_))));
}

proptest! {
    #[test]
    fn penalty_is_linear_in_lambda(
        theta in prop::collection::vec(-3.0f64..3.0, 5),
        anchor in prop::collection::vec(-3.0f64..3.0, 5),
        fisher in prop::collection::vec(0.0f64..4.0, 5),
        l1 in 0.0f64..10.0,
        l2 in 0.0f64..10.0,
    ) {
        let ps = five_params(&theta);
        let v1 = penalty_value(&[penalty_for(&ps, &fisher, &anchor, l1)], &ps);
        let v2 = penalty_value(&[penalty_for(&ps, &fisher, &anchor, l2)], &ps);
        let unit = penalty_value(&[penalty_for(&ps, &fisher, &anchor, 1.0)], &ps);
        prop_assert!(unit >= 0.0);
        prop_assert!((v1 - l1 * unit).abs() <= 1e-12 * (1.0 + v1.abs()));
        if l1 < l2 {
            prop_assert!(v1 <= v2);
        }
    }

    #[test]
    fn fisher_entries_are_non_negative(w in prop::collection::vec(-2.0f64..2.0, 3), seed in 0u64..1000) {
        let mut toy = LinearToy::new([w[0], w[1], w[2]]);
        let f = fisher_from_batches(&mut toy, &random_windows(5, 3, 12, seed)).unwrap();
        prop_assert!(f.get("w").unwrap().data().iter().all(|&v| v >= 0.0));
    }
}

struct Fixture {
    corpus: Corpus,
    other: Corpus,
    config: ModelConfig,
}

fn fixture() -> Fixture {
    let a = generate(SynthDomain::Prose, 20_000, 5);
    let b = generate(SynthDomain::Code, 20_000, 5);
    let vocab = Arc::new(Vocabulary::from_texts([a.as_str(), b.as_str()]));
    Fixture {
        corpus: Corpus::from_text(&b, "b", vocab.clone()).unwrap(),
        other: Corpus::from_text(&a, "a", vocab.clone()).unwrap(),
        config: ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_seq_len: 16,
            seed: 3,
        },
    }
}

fn train(fx: &Fixture, strategy: StrategyConfig, penalty_lambda: Option<f64>, steps: usize) -> (MlmModel, Vec<f64>) {
    let mut model = MlmModel::new(fx.config.clone()).unwrap();
    let penalties = match penalty_lambda {
        Some(l) => {
            let f = compute_fisher(&mut model, &fx.other, 0.05, 16, 0.15, 1).unwrap();
            vec![TaskPenalty::new("a", f, model.snapshot(), l).unwrap()]
        }
        None => vec![],
    };
    let schedule = TrainingSchedule::polynomial(1e-2, steps, 0.06);
    let mut trainer = Trainer::new(model.params(), strategy, schedule, AdamConfig::default(), steps, vec![]).unwrap();
    let mut losses = vec![];
    for batch in batch_iter(&fx.corpus, 4, 16, 2, 0.15).unwrap().take(steps) {
        let m = trainer.continual_step(&mut model, &batch, &penalties, None).unwrap();
        assert!(m.penalty_value >= 0.0);
        losses.push(m.loss);
    }
    (model, losses)
}

#[test]
fn zero_lambda_ewc_matches_no_strategy_bit_for_bit() {
    let fx = fixture();
    let (plain, l1) = train(&fx, StrategyConfig::of(StrategyKind::None), None, 12);
    let (ewc, l2) = train(&fx, StrategyConfig::ewc(0.0, 0.05), Some(0.0), 12);
    assert_eq!(l1, l2);
    for (a, b) in plain.params().iter().zip(ewc.params().iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let (anchored, _) = train(&fx, StrategyConfig::ewc(1.0, 0.05), Some(1.0), 12);
    assert_ne!(
        plain.params().by_name("embed.token").unwrap().value,
        anchored.params().by_name("embed.token").unwrap().value
    );
}

#[test]
fn strategy_state_is_checked() {
    let fx = fixture();
    let mut model = MlmModel::new(fx.config.clone()).unwrap();
    let schedule = TrainingSchedule::polynomial(1e-2, 4, 0.0);
    let batch = batch_iter(&fx.corpus, 4, 16, 2, 0.15).unwrap().next().unwrap();
    let mut t = Trainer::new(model.params(), StrategyConfig::ewc(1.0, 0.1), schedule, AdamConfig::default(), 4, vec![])
        .unwrap();
    assert!(matches!(t.continual_step(&mut model, &batch, &[], None), Err(CalmError::Contract(_))));
    let cfg =
        ReplayConfig { mode: ReplayMode::Interval, interval_steps: 2, updates_per_event: 3, ..Default::default() };
    let mut t =
        Trainer::new(model.params(), StrategyConfig::replay(cfg), schedule, AdamConfig::default(), 4, vec![(2, 3)])
            .unwrap();
    assert!(matches!(t.continual_step(&mut model, &batch, &[], None), Err(CalmError::Contract(_))));
    assert!(Trainer::new(model.params(), StrategyConfig::default(), schedule, AdamConfig::default(), 4, vec![(2, 3)])
        .is_err());
}

#[test]
fn replay_events_follow_the_plan() {
    let fx = fixture();
    let mut model = MlmModel::new(fx.config.clone()).unwrap();
    let cfg =
        ReplayConfig { mode: ReplayMode::Interval, interval_steps: 3, updates_per_event: 2, ..Default::default() };
    let plan = replay_plan(&cfg, 7, 0, 4);
    assert_eq!(plan, vec![(3, 2), (6, 2)]);
    let mut buffer = ReplayBuffer::new(3);
    buffer.fill(batch_iter(&fx.other, 4, 16, 9, 0.15).unwrap(), 3).unwrap();
    buffer.check_disjoint_from("b").unwrap();
    let schedule = TrainingSchedule::polynomial(1e-2, 14, 0.06);
    let mut t =
        Trainer::new(model.params(), StrategyConfig::replay(cfg), schedule, AdamConfig::default(), 7, plan).unwrap();
    let mut replayed = vec![];
    for batch in batch_iter(&fx.corpus, 4, 16, 2, 0.15).unwrap().take(14) {
        let m = t.continual_step(&mut model, &batch, &[], Some(&buffer)).unwrap();
        replayed.push(m.replayed_batches);
    }
    assert_eq!(replayed, vec![0, 0, 2, 0, 0, 2, 0, 0, 0, 2, 0, 0, 2, 0]);
    assert_eq!(t.optimizer().step_count(), 14 + 8);
    let batch = batch_iter(&fx.corpus, 4, 16, 2, 0.15).unwrap().next().unwrap();
    assert!(t.continual_step(&mut model, &batch, &[], Some(&buffer)).is_err());
}
