//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. The desk-scale runs take a while on one core;
//! set CALM_ACCEPTANCE_DIR to keep their output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use calm_core::continual::{compute_fisher, ewc_penalty, fisher_samples, FisherDiagonal, StrategyKind, TaskPenalty};
use calm_core::data::{Corpus, TokenBatch, Vocabulary};
use calm_core::eval::MetricsReport;
use calm_core::experiment::{run, ExperimentConfig, RunOptions, REPORT_FILE};
use calm_core::gradcheck::{analytic_grads, numeric_grads, relative_error};
use calm_core::model::{MaskedLm, MlmModel, ModelConfig, Snapshot};
use calm_core::optim::{layer_lr, TrainingSchedule, LRC_LAYER_DECAY, STLR_CUT_FRAC, STLR_RATIO};
use calm_core::rng::substream;
use calm_core::{ParamSet, Parameter, Tape, Tensor};
use rand::Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const SOURCE: &str = "prose";
const TARGET: &str = "code";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", cells.join(", "))
}

fn fisher_oracle() -> Outcome {
    let vocab = Arc::new(Vocabulary::from_symbols(['a', 'b']));
    let text: String = (0..600).map(|i| if (i * 7 + i / 5) % 3 == 0 { 'b' } else { 'a' }).collect();
    let corpus = Corpus::from_text(&text, "toy", vocab.clone()).unwrap();
    let cfg =
        ModelConfig { vocab_size: vocab.len(), d_model: 2, n_heads: 1, n_layers: 1, d_ff: 2, max_seq_len: 4, seed: 3 };
    let mut model = MlmModel::new(cfg).unwrap();
    let n_params = model.params().numel();
    let (fraction, seq_len, mask_prob, seed) = (0.5, 4, 0.5, 17);
    let fisher = compute_fisher(&mut model, &corpus, fraction, seq_len, mask_prob, seed).unwrap();

    let samples = fisher_samples(&corpus, fraction, seq_len, mask_prob, seed).unwrap();
    let mut params = model.params().clone();
    let mut sums: BTreeMap<String, Vec<f64>> =
        params.iter().map(|p| (p.name.clone(), vec![0.0; p.value.numel()])).collect();
    let mut n = 0usize;
    for b in samples.iter().filter(|b| b.target_count() > 0) {
        params.zero_grads();
        let mut tape = Tape::new();
        let loss = model.mlm_loss(&mut tape, b).unwrap();
        tape.backward(loss, &mut params).unwrap();
        for p in params.iter() {
            for (s, g) in sums.get_mut(&p.name).unwrap().iter_mut().zip(p.grad.data()) {
                *s += g * g;
            }
        }
        n += 1;
    }
    let mut worst = 0.0f64;
    for (name, s) in &sums {
        for (a, b) in fisher.get(name).unwrap().data().iter().zip(s) {
            worst = worst.max(rel(*a, b / n as f64));
        }
    }
    let pass = n_params <= 100 && n > 0 && fisher.sample_count() == n && worst <= 1e-12;
    outcome(pass, format!("{n_params} params, {n} samples, max relative error {worst:.2e} (<= 1e-12)"))
}

fn five_params(values: &[f64]) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.add(Parameter::new("a", Tensor::from_vec(values[..2].to_vec()), 0)).unwrap();
    ps.add(Parameter::new("b", Tensor::from_vec(values[2..].to_vec()), 1)).unwrap();
    ps
}

fn ewc_gradient_oracle() -> Outcome {
    let mut rng = substream(2024, "acceptance-ewc");
    let mut worst = 0.0f64;
    let draws = 24;
    for _ in 0..draws {
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..5).map(|_| rng.random_range(lo..hi)).collect() };
        let (theta, anchor, f) = (draw(-2.0, 2.0), draw(-2.0, 2.0), draw(0.0, 4.0));
        let lambda = rng.random_range(0.05..20.0);
        let fisher = FisherDiagonal::new(
            BTreeMap::from([
                ("a".to_string(), Tensor::from_vec(f[..2].to_vec())),
                ("b".to_string(), Tensor::from_vec(f[2..].to_vec())),
            ]),
            1,
        )
        .unwrap();
        let pen = TaskPenalty::new("t", fisher, Snapshot::of(&five_params(&anchor)), lambda).unwrap();
        let mut ps = five_params(&theta);
        let mut tape = Tape::new();
        let v = ewc_penalty(&mut tape, std::slice::from_ref(&pen), &ps).unwrap();
        ps.zero_grads();
        tape.backward(v, &mut ps).unwrap();
        let analytic = analytic_grads(&ps);
        let numeric = numeric_grads(&mut ps, 1e-5, |p| pen.value(p).unwrap());
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    outcome(worst < 1e-6, format!("{draws} draws, max relative error {worst:.2e} (< 1e-6)"))
}

fn model_gradcheck() -> Outcome {
    let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 16, max_seq_len: 6, seed: 5 };
    let mut model = MlmModel::new(cfg.clone()).unwrap();
    for p in model.params_mut().iter_mut() {
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            *x += 0.25 * (i as f64 * 1.3 + p.name.len() as f64).cos();
        }
    }
    let mut rng = substream(8, "acceptance-batch");
    let (b, l) = (3, 6);
    let inputs: Vec<u32> = (0..b * l).map(|_| rng.random_range(3..12)).collect();
    let targets: Vec<i64> =
        inputs.iter().enumerate().map(|(i, &t)| if i % 4 == 1 { i64::from(t) } else { -1 }).collect();
    let batch = TokenBatch { inputs, targets, batch_size: b, seq_len: l, domain_id: "g".into() };
    let mut tape = Tape::new();
    let loss = model.mlm_loss(&mut tape, &batch).unwrap();
    model.params_mut().zero_grads();
    tape.backward(loss, model.params_mut()).unwrap();
    let analytic = analytic_grads(model.params());
    let mut probe = MlmModel::new(cfg).unwrap();
    let mut params = model.params().clone();
    let numeric = numeric_grads(&mut params, 1e-5, |ps| {
        probe.restore(&Snapshot::of(ps)).unwrap();
        let mut tape = Tape::new();
        let loss = probe.mlm_loss(&mut tape, &batch).unwrap();
        tape.value(loss).item().unwrap()
    });
    let err = relative_error(&analytic, &numeric);
    outcome(err < 1e-5, format!("d=8, 1 layer, {} params, relative error {err:.2e} (< 1e-5)", model.params().numel()))
}

fn scheduler_exactness() -> Outcome {
    let (eta, total) = (2e-3, 1000);
    let s = TrainingSchedule::stlr(eta, total, STLR_CUT_FRAC, STLR_RATIO);
    let cut = s.cut();
    let points = [s.lr_at(0).unwrap(), s.lr_at(cut).unwrap(), s.lr_at(total).unwrap()];
    let exact = points == [eta / STLR_RATIO, eta, eta / STLR_RATIO];
    let top = 5;
    let mut worst = 0.0f64;
    for g in 1..=top {
        let ratio = layer_lr(eta, LRC_LAYER_DECAY, g, top) / layer_lr(eta, LRC_LAYER_DECAY, g - 1, top);
        worst = worst.max((ratio - 2.6).abs());
    }
    outcome(
        exact && worst <= 1e-12,
        format!("stlr at 0, {cut}, {total} = {points:?}; adjacent layer ratio off 2.6 by {worst:.1e}"),
    )
}

/// Desk-scale runs shared by the reproduction criteria.
struct Desk {
    root: PathBuf,
    configs: PathBuf,
    elapsed: BTreeMap<String, f64>,
}

impl Desk {
    fn config(&self, rel: &str, seed: u64, out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::load(&self.configs.join(rel)).unwrap();
        cfg.seed = seed;
        cfg.output_dir = out.to_path_buf();
        cfg
    }

    fn timed<T>(&mut self, key: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.elapsed.entry(key.to_string()).or_default() += t.elapsed().as_secs_f64();
        out
    }

    /// Runs `cfg`, continuing from a copy of `from` when given.
    fn run(&mut self, key: &str, cfg: &ExperimentConfig, from: Option<&Path>) -> MetricsReport {
        if let Some(src) = from {
            copy_dir(src, &cfg.output_dir);
        }
        let opts = RunOptions { resume: from.is_some(), ..Default::default() };
        let report = self.timed(key, || run(cfg, &opts));
        report.unwrap_or_else(|e| panic!("run {} failed: {e}", cfg.run_id))
    }

    fn secs(&self, keys: &[&str]) -> f64 {
        keys.iter().filter_map(|k| self.elapsed.get(*k)).sum()
    }
}

fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            std::fs::copy(entry.path(), dst.join(entry.file_name())).unwrap();
        }
    }
}

struct SeedRuns {
    base: MetricsReport,
    none: MetricsReport,
    ewc: MetricsReport,
    ewc10: MetricsReport,
    no_fisher: MetricsReport,
    er: MetricsReport,
    three_none: MetricsReport,
    three_ewc: MetricsReport,
}

fn seed_runs(desk: &mut Desk, seed: u64) -> SeedRuns {
    let dir = desk.root.join(format!("seed{seed}"));
    let base_dir = dir.join("base");
    let cfg = desk.config("shift/none.toml", seed, &base_dir);
    let base = desk.timed("base", || run(&cfg, &RunOptions { stop_after: Some(1), ..Default::default() })).unwrap();
    let shift = |desk: &mut Desk, key: &str, rel: &str, from: &Path| {
        let cfg = desk.config(rel, seed, &dir.join(key));
        desk.run(key, &cfg, Some(from))
    };
    let none = shift(desk, "none", "shift/none.toml", &base_dir);
    let ewc = shift(desk, "ewc", "shift/ewc.toml", &base_dir);
    let ewc10 = shift(desk, "ewc10", "shift/ewc_lambda10.toml", &base_dir);
    let no_fisher = shift(desk, "no_fisher", "shift/ewc_no_fisher.toml", &base_dir);
    let er = shift(desk, "er", "shift/er.toml", &base_dir);
    let three_none = shift(desk, "three_none", "two_shifts/none.toml", &dir.join("none"));
    let three_ewc = shift(desk, "three_ewc", "two_shifts/ewc.toml", &dir.join("ewc"));
    eprintln!("seed {seed} done");
    SeedRuns { base, none, ewc, ewc10, no_fisher, er, three_none, three_ewc }
}

fn ratio(r: &MetricsReport, domain: &str) -> f64 {
    r.final_ratio(domain).unwrap_or(f64::NAN)
}

fn ppl(r: &MetricsReport, domain: &str) -> f64 {
    r.final_perplexity(domain).unwrap_or(f64::NAN)
}

fn forgetting(desk: &Desk, runs: &[SeedRuns]) -> Outcome {
    let drops: Vec<f64> = runs
        .iter()
        .map(|s| {
            let init = s.base.checkpoint("init").unwrap().domain(SOURCE).unwrap().perplexity;
            let after = s.base.checkpoint("after A").unwrap().domain(SOURCE).unwrap().perplexity;
            1.0 - after / init
        })
        .collect();
    let ratios: Vec<f64> = runs.iter().map(|s| ratio(&s.none, SOURCE)).collect();
    let secs = desk.secs(&["base", "none"]);
    let pass = drops.iter().all(|d| *d >= 0.3) && ratios.iter().all(|r| *r >= 1.2) && secs <= 1200.0;
    outcome(
        pass,
        format!("stage-A drop {} (>= 0.30), {SOURCE} ratio {} (>= 1.2), {secs:.0}s", fmt(&drops), fmt(&ratios)),
    )
}

fn ewc_ordering(desk: &Desk, runs: &[SeedRuns]) -> Outcome {
    let ewc: Vec<f64> = runs.iter().map(|s| ratio(&s.ewc, SOURCE)).collect();
    let none: Vec<f64> = runs.iter().map(|s| ratio(&s.none, SOURCE)).collect();
    let tgt: Vec<f64> = runs.iter().map(|s| ppl(&s.ewc, TARGET) / ppl(&s.none, TARGET)).collect();
    let secs = desk.secs(&["ewc"]);
    let pass = ewc.iter().zip(&none).all(|(e, n)| e < n) && tgt.iter().all(|t| *t <= 1.5) && secs <= 1200.0;
    outcome(
        pass,
        format!(
            "{SOURCE} ratio ewc {} < none {}; {TARGET} ppl ewc/none {} (<= 1.5), {secs:.0}s",
            fmt(&ewc),
            fmt(&none),
            fmt(&tgt)
        ),
    )
}

fn lambda_extreme(runs: &[SeedRuns]) -> Outcome {
    let r10: Vec<f64> = runs.iter().map(|s| ratio(&s.ewc10, SOURCE)).collect();
    let r1: Vec<f64> = runs.iter().map(|s| ratio(&s.ewc, SOURCE)).collect();
    let p10: Vec<f64> = runs.iter().map(|s| ppl(&s.ewc10, TARGET)).collect();
    let p1: Vec<f64> = runs.iter().map(|s| ppl(&s.ewc, TARGET)).collect();
    let pass = median(r10.clone()) <= median(r1.clone()) && median(p10.clone()) >= median(p1.clone());
    outcome(
        pass,
        format!(
            "median {SOURCE} ratio lambda=10 {:.3} <= lambda=1 {:.3}; median {TARGET} ppl {:.3} >= {:.3}; per seed {} vs {}",
            median(r10.clone()),
            median(r1.clone()),
            median(p10),
            median(p1),
            fmt(&r10),
            fmt(&r1)
        ),
    )
}

fn replay(runs: &[SeedRuns]) -> Outcome {
    let er: Vec<f64> = runs.iter().map(|s| ratio(&s.er, SOURCE)).collect();
    let none: Vec<f64> = runs.iter().map(|s| ratio(&s.none, SOURCE)).collect();
    let pass = median(er.clone()) < median(none.clone());
    outcome(
        pass,
        format!(
            "median {SOURCE} ratio er {:.3} < none {:.3}; per seed {} vs {}",
            median(er.clone()),
            median(none.clone()),
            fmt(&er),
            fmt(&none)
        ),
    )
}

fn without_identity(r: &MetricsReport) -> String {
    let mut r = r.clone();
    r.run_id.clear();
    r.strategy.label.clear();
    r.strategy.stages.clear();
    r.to_json()
}

fn neutrality(desk: &mut Desk) -> Outcome {
    let seed = SEEDS[0];
    let dir = desk.root.join(format!("seed{seed}"));
    let mut cfg = desk.config("shift/ewc.toml", seed, &dir.join("ewc_lambda0"));
    cfg.run_id = "shift-ewc-lambda0".into();
    cfg.stages[1].strategy.ewc.lambda_weight = 0.0;
    assert_eq!(cfg.stages[1].strategy.kind, StrategyKind::Ewc);
    let zero = desk.run("neutral", &cfg, Some(&dir.join("base")));
    let none = read(&dir.join("none").join(REPORT_FILE));
    let params_same = std::fs::read(dir.join("none/stage_1.ckpt")).unwrap()
        == std::fs::read(cfg.output_dir.join("stage_1.ckpt")).unwrap();
    let report_same = without_identity(&zero) == without_identity(&none);
    outcome(
        params_same && report_same,
        format!("final parameters identical: {params_same}; reports identical: {report_same}"),
    )
}

fn read(path: &Path) -> MetricsReport {
    calm_core::eval::read_report(path).unwrap()
}

fn no_fisher(runs: &[SeedRuns]) -> Outcome {
    let nf: Vec<f64> = runs.iter().map(|s| ppl(&s.no_fisher, TARGET)).collect();
    let f: Vec<f64> = runs.iter().map(|s| ppl(&s.ewc, TARGET)).collect();
    let pass = median(nf.clone()) >= median(f.clone());
    outcome(
        pass,
        format!(
            "median {TARGET} ppl no-Fisher {:.3} >= Fisher {:.3}; per seed {} vs {}",
            median(nf.clone()),
            median(f.clone()),
            fmt(&nf),
            fmt(&f)
        ),
    )
}

fn two_stage(desk: &Desk, runs: &[SeedRuns]) -> Outcome {
    let med = |f: &dyn Fn(&SeedRuns) -> f64| median(runs.iter().map(f).collect());
    let (a_ewc, a_none) = (med(&|s| ratio(&s.three_ewc, SOURCE)), med(&|s| ratio(&s.three_none, SOURCE)));
    let (b_ewc, b_none) = (med(&|s| ratio(&s.three_ewc, TARGET)), med(&|s| ratio(&s.three_none, TARGET)));
    let secs = desk.secs(&["three_none", "three_ewc"]);
    let pass = a_ewc < a_none && b_ewc < b_none && secs <= 1800.0;
    outcome(
        pass,
        format!("median {SOURCE} ratio {a_ewc:.3} < {a_none:.3}; median {TARGET} ratio {b_ewc:.3} < {b_none:.3}; {secs:.0}s"),
    )
}

fn cli_reproducibility(root: &Path, configs: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_calm");
    let config = configs.join("smoke.toml");
    let mut outputs = Vec::new();
    for run in ["first", "second"] {
        let out = root.join("cli").join(run);
        let result = Command::new(bin)
            .arg("run")
            .arg(&config)
            .arg("--seed")
            .arg("9")
            .arg("--output-dir")
            .arg(&out)
            .arg("--quiet")
            .output()
            .expect("calm runs");
        if !result.status.success() {
            return outcome(
                false,
                format!("calm run exited with {}: {}", result.status, String::from_utf8_lossy(&result.stderr)),
            );
        }
        outputs.push(out);
    }
    let same =
        |name: &str| std::fs::read(outputs[0].join(name)).unwrap() == std::fs::read(outputs[1].join(name)).unwrap();
    let pass = same(REPORT_FILE) && same("report.txt");
    outcome(pass, format!("`calm run {}` twice: report.json and report.txt byte-identical: {pass}", config.display()))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let (root, _guard) = match std::env::var_os("CALM_ACCEPTANCE_DIR") {
        Some(dir) => (PathBuf::from(dir), None),
        None => {
            let tmp = tempfile::tempdir().unwrap();
            (tmp.path().to_path_buf(), Some(tmp))
        }
    };

    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "Fisher oracle", fisher_oracle()),
        (2, "EWC gradient oracle", ewc_gradient_oracle()),
        (3, "model gradient check", model_gradcheck()),
        (4, "scheduler exactness", scheduler_exactness()),
    ];
    let mut desk = Desk { root: root.clone(), configs: configs.clone(), elapsed: BTreeMap::new() };
    let runs: Vec<SeedRuns> = SEEDS.iter().map(|&s| seed_runs(&mut desk, s)).collect();
    results.push((5, "forgetting reproduction", forgetting(&desk, &runs)));
    results.push((6, "EWC mitigation ordering", ewc_ordering(&desk, &runs)));
    results.push((7, "lambda-extreme behavior", lambda_extreme(&runs)));
    results.push((8, "replay mitigation", replay(&runs)));
    results.push((9, "neutrality bit-exactness", neutrality(&mut desk)));
    results.push((10, "no-Fisher ablation", no_fisher(&runs)));
    results.push((11, "two-stage robustness", two_stage(&desk, &runs)));
    results.push((12, "CLI reproducibility", cli_reproducibility(&root, &configs)));

    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{tag} {n:>2} {name}: {}", o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
