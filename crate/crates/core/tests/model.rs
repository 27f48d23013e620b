use std::collections::BTreeSet;
use std::sync::Arc;

use calm_core::data::synth::{generate, SynthDomain};
use calm_core::data::{batch_iter, mask_batch, Corpus, TokenBatch, Vocabulary};
use calm_core::gradcheck::{analytic_grads, numeric_grads, relative_error};
use calm_core::model::{MaskedLm, MlmModel, ModelConfig, Snapshot};
use calm_core::rng::substream;
use calm_core::{CalmError, Tape, Tensor};

fn config(vocab_size: usize, d: usize, heads: usize, layers: usize, ff: usize, max_len: usize) -> ModelConfig {
    ModelConfig { vocab_size, d_model: d, n_heads: heads, n_layers: layers, d_ff: ff, max_seq_len: max_len, seed: 11 }
}

fn loss_of(model: &MlmModel, batch: &TokenBatch) -> f64 {
    let mut tape = Tape::new();
    let loss = model.mlm_loss(&mut tape, batch).unwrap();
    tape.value(loss).item().unwrap()
}

fn random_batch(vocab: usize, b: usize, l: usize, seed: u64) -> TokenBatch {
    use rand::Rng;
    let mut rng = substream(seed, "tokens");
    let seqs: Vec<u32> = (0..b * l).map(|_| rng.random_range(3..vocab as u32)).collect();
    let mut mrng = substream(seed, "mask");
    let mut batch = mask_batch(&seqs, b, l, 0.3, vocab, "t", &mut mrng).unwrap();
    if batch.target_count() == 0 {
        batch.targets[0] = i64::from(seqs[0]);
    }
    batch
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = MlmModel::new(config(30, 16, 2, 2, 32, 16)).unwrap();
    let b = MlmModel::new(config(30, 16, 2, 2, 32, 16)).unwrap();
    for (x, y) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.value, y.value);
    }
    let mut other = config(30, 16, 2, 2, 32, 16);
    other.seed = 12;
    let c = MlmModel::new(other).unwrap();
    assert_ne!(a.params().by_name("embed.token").unwrap().value, c.params().by_name("embed.token").unwrap().value);
}

#[test]
fn parameter_count_matches_closed_form() {
    let (v, d, layers, ff, l) = (40usize, 64usize, 2usize, 128usize, 64usize);
    let model = MlmModel::new(config(v, d, 4, layers, ff, l)).unwrap();
    let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d);
    let expected = v * d + l * d + layers * block + 2 * d + v;
    assert_eq!(expected, 73_768);
    assert_eq!(model.params().numel(), expected);
}

#[test]
fn layer_norm_gains_start_at_one_and_biases_at_zero() {
    let model = MlmModel::new(config(30, 16, 2, 2, 32, 16)).unwrap();
    for p in model.params().iter() {
        if p.name.ends_with("gain") {
            assert!(p.value.data().iter().all(|&x| x == 1.0), "{}", p.name);
        }
        if p.name.ends_with("bias") {
            assert!(p.value.data().iter().all(|&x| x == 0.0), "{}", p.name);
        }
    }
}

#[test]
fn invalid_config_is_rejected() {
    assert!(matches!(MlmModel::new(config(30, 10, 3, 1, 8, 8)), Err(CalmError::Contract(_))));
    assert!(matches!(MlmModel::new(config(30, 8, 2, 0, 8, 8)), Err(CalmError::Contract(_))));
}

#[test]
fn untrained_loss_is_near_uniform_baseline() {
    let text = generate(SynthDomain::Prose, 60_000, 3);
    let vocab = Arc::new(Vocabulary::from_texts([text.as_str()]));
    let corpus = Corpus::from_text(&text, "prose", vocab.clone()).unwrap();
    let model = MlmModel::new(config(vocab.len(), 32, 2, 2, 64, 32)).unwrap();
    let batches: Vec<_> = batch_iter(&corpus, 8, 32, 5, 0.15).unwrap().take(50).collect();
    assert_eq!(batches.len(), 50);
    let mean = batches.iter().map(|b| loss_of(&model, b)).sum::<f64>() / 50.0;
    let baseline = (vocab.len() as f64).ln();
    assert!((mean / baseline - 1.0).abs() < 0.15, "mean {mean} vs ln V {baseline}");
}

#[test]
fn all_ignored_targets_is_an_empty_loss() {
    let model = MlmModel::new(config(12, 8, 2, 1, 16, 4)).unwrap();
    let batch =
        TokenBatch { inputs: vec![3, 4, 5, 6], targets: vec![-1; 4], batch_size: 1, seq_len: 4, domain_id: "t".into() };
    let mut tape = Tape::new();
    assert!(matches!(model.mlm_loss(&mut tape, &batch), Err(CalmError::EmptyLoss)));
    assert_eq!(model.masked_nll(&batch).unwrap(), (0.0, 0));
}

fn stack(rows: &[TokenBatch]) -> TokenBatch {
    TokenBatch {
        inputs: rows.iter().flat_map(|r| r.inputs.clone()).collect(),
        targets: rows.iter().flat_map(|r| r.targets.clone()).collect(),
        batch_size: rows.len(),
        seq_len: rows[0].seq_len,
        domain_id: rows[0].domain_id.clone(),
    }
}

#[test]
fn duplicating_rows_keeps_mean_loss() {
    let model = MlmModel::new(config(20, 16, 2, 1, 32, 8)).unwrap();
    let batch = random_batch(20, 3, 8, 1);
    let rows: Vec<_> = (0..3).map(|b| batch.row(b)).collect();
    let doubled = stack(&[rows.clone(), rows.clone()].concat());
    let (a, b) = (loss_of(&model, &batch), loss_of(&model, &doubled));
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn permuting_rows_keeps_loss() {
    let model = MlmModel::new(config(20, 16, 2, 1, 32, 8)).unwrap();
    let batch = random_batch(20, 4, 8, 2);
    let rows: Vec<_> = (0..4).map(|b| batch.row(b)).collect();
    let permuted = stack(&[rows[2].clone(), rows[0].clone(), rows[3].clone(), rows[1].clone()]);
    let (a, b) = (loss_of(&model, &batch), loss_of(&model, &permuted));
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn ignored_positions_do_not_affect_loss_or_gradient() {
    let mut model = MlmModel::new(config(20, 16, 2, 1, 32, 8)).unwrap();
    let batch = random_batch(20, 2, 8, 3);
    let mut only_one = batch.clone();
    let keep = only_one.targets.iter().position(|&t| t >= 0).unwrap();
    for (i, t) in only_one.targets.iter_mut().enumerate() {
        if i != keep {
            *t = -1;
        }
    }
    let (nll, count) = model.masked_nll(&only_one).unwrap();
    assert_eq!(count, 1);
    let mut tape = Tape::new();
    let loss = model.mlm_loss(&mut tape, &only_one).unwrap();
    assert!((tape.value(loss).item().unwrap() - nll).abs() < 1e-12);
    tape.backward(loss, model.params_mut()).unwrap();
    let head = model.params().by_name("head.bias").unwrap().grad.data().to_vec();
    // d loss / d bias = softmax - onehot, which sums to zero
    assert!(head.iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn attention_rows_sum_to_one() {
    let model = MlmModel::new(config(20, 16, 4, 2, 32, 8)).unwrap();
    let batch = random_batch(20, 3, 8, 4);
    let maps = model.attention_maps(&batch.inputs, 3, 8).unwrap();
    assert_eq!(maps.len(), 2);
    for m in &maps {
        assert_eq!(m.shape(), &[3, 4, 8, 8]);
        for row in m.data().chunks_exact(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let cfg = config(10, 8, 2, 1, 16, 4);
    let mut model = MlmModel::new(cfg.clone()).unwrap();
    // Move off the init point so layer norms and biases see non-trivial values.
    for p in model.params_mut().iter_mut() {
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            *x += 0.3 * ((i as f64 * 0.7 + p.name.len() as f64).sin());
        }
    }
    let batch = random_batch(10, 2, 4, 9);
    let mut tape = Tape::new();
    let loss = model.mlm_loss(&mut tape, &batch).unwrap();
    model.params_mut().zero_grads();
    tape.backward(loss, model.params_mut()).unwrap();
    let analytic = analytic_grads(model.params());

    let mut probe = MlmModel::new(cfg).unwrap();
    let mut params = model.params().clone();
    let numeric = numeric_grads(&mut params, 1e-5, |ps| {
        probe.restore(&Snapshot::of(ps)).unwrap();
        loss_of(&probe, &batch)
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn layer_groups_partition_the_parameters() {
    let layers = 3;
    let model = MlmModel::new(config(20, 16, 2, layers, 32, 8)).unwrap();
    let all: BTreeSet<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
    let mut union = BTreeSet::new();
    for g in 0..=layers + 1 {
        for p in model.params().iter().filter(|p| p.layer_group == g) {
            assert!(union.insert(p.name.as_str()), "{} in two groups", p.name);
        }
    }
    assert_eq!(union, all);
    assert_eq!(model.params().max_layer_group(), layers + 1);
    assert_eq!(model.config().top_group(), layers + 1);
}

#[test]
fn snapshot_round_trip_and_independence() {
    let mut model = MlmModel::new(config(20, 16, 2, 1, 32, 8)).unwrap();
    let snap = model.snapshot();
    let original: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    for p in model.params_mut().iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x += 1.0);
        p.grad.data_mut().iter_mut().for_each(|g| *g = 7.0);
    }
    assert_eq!(snap.get("head.bias").unwrap().data()[0], 0.0);
    model.restore(&snap).unwrap();
    for (p, o) in model.params().iter().zip(&original) {
        assert_eq!(&p.value, o);
        assert!(p.grad.data().iter().all(|&g| g == 7.0));
    }
}

#[test]
fn restore_from_other_architecture_fails() {
    let mut model = MlmModel::new(config(20, 16, 2, 1, 32, 8)).unwrap();
    let deeper = MlmModel::new(config(20, 16, 2, 2, 32, 8)).unwrap();
    assert!(matches!(model.restore(&deeper.snapshot()), Err(CalmError::IncompatibleCheckpoint(_))));
    let wider = MlmModel::new(config(20, 16, 2, 1, 64, 8)).unwrap();
    assert!(matches!(model.restore(&wider.snapshot()), Err(CalmError::IncompatibleCheckpoint(_))));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = MlmModel::new(config(20, 16, 2, 1, 32, 8)).unwrap();
    model.save(&path).unwrap();
    let back = MlmModel::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    for (a, b) in back.params().iter().zip(model.params().iter()) {
        assert_eq!(a.value, b.value);
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"CALM1");
}

#[test]
fn out_of_vocab_ids_are_rejected() {
    let model = MlmModel::new(config(12, 8, 2, 1, 16, 4)).unwrap();
    let batch = TokenBatch {
        inputs: vec![3, 4, 50, 6],
        targets: vec![4, -1, -1, -1],
        batch_size: 1,
        seq_len: 4,
        domain_id: "t".into(),
    };
    assert!(model.masked_nll(&batch).is_err());
}
