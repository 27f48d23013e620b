use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use calm_core::data::synth::{generate, SynthDomain};
use calm_core::eval::{read_report, render_table, MetricsReport};
use calm_core::experiment::{
    run, sweep, ExperimentConfig, LedgerEntry, RunLedger, RunOptions, SweepGrid, LEDGER_FILE, REPORT_FILE,
};
use calm_core::parallel::THREADS_ENV;
use clap::{Args, Parser, Subcommand};

/// Continual masked-LM pre-training experiments.
#[derive(Parser)]
#[command(name = "calm", version, after_help = "Set CALM_THREADS to cap worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Replace the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of an experiment and write its report.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Continue after the last completed stage in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many stages.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// One run per point of a parameter grid, ranked in a summary table.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check a config and list every violation.
    Validate { config: PathBuf },
    /// Summarize the reports and ledgers under a run or sweep directory.
    Report {
        dir: PathBuf,
        /// Print the reports as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic corpus.
    Synth {
        /// prose, code or clinical
        kind: String,
        #[arg(long, default_value_t = 2_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &overrides.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        if v.parse::<usize>().map_or(true, |n| n == 0) {
            bail!("{THREADS_ENV} must be a positive integer, got `{v}`");
        }
    }
    match cli.command {
        Command::Run { config, overrides, resume, stop_after } => {
            let cfg = load(&config, &overrides)?;
            let opts = RunOptions { resume, stop_after, audit: None, verbose: !overrides.quiet };
            let report = run(&cfg, &opts).with_context(|| format!("run `{}` failed", cfg.run_id))?;
            if stop_after.is_some_and(|s| s < cfg.stages.len()) {
                println!("stopped after {} stage(s); resume with --resume", stop_after.unwrap_or_default());
            } else {
                print!("{}", render_table(std::slice::from_ref(&report)));
                println!("report: {}", cfg.output_dir.join(REPORT_FILE).display());
            }
        }
        Command::Sweep { config, grid, overrides } => {
            let cfg = load(&config, &overrides)?;
            let grid = SweepGrid::load(&grid)?;
            let opts = RunOptions { verbose: !overrides.quiet, ..Default::default() };
            let (_, summary) = sweep(&cfg, &grid, &opts)?;
            print!("{}", summary.render());
            if !summary.failures.is_empty() {
                eprintln!("{} run(s) failed", summary.failures.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let violations = cfg.validate();
            if !violations.is_empty() {
                for v in &violations {
                    eprintln!("{}: {v}", config.display());
                }
                return Ok(ExitCode::FAILURE);
            }
            println!("{}: ok ({} stages, {} domains)", config.display(), cfg.stages.len(), cfg.domains.len());
        }
        Command::Report { dir, json } => report(&dir, json)?,
        Command::Synth { kind, bytes, seed, out } => {
            let Some(domain) = SynthDomain::parse(&kind) else {
                bail!("unknown synthetic domain `{kind}`; expected prose, code or clinical");
            };
            let text = generate(domain, bytes, seed);
            std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            println!("{}: {} bytes of {}", out.display(), text.len(), domain.name());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Run directories at `dir` and one level below it that hold a report.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.join(REPORT_FILE).exists() || dir.join(LEDGER_FILE).exists() {
        out.push(dir.to_path_buf());
    }
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    out.extend(subdirs.into_iter().filter(|p| p.join(REPORT_FILE).exists() || p.join(LEDGER_FILE).exists()));
    Ok(out)
}

#[derive(Default)]
struct StageSummary {
    steps: usize,
    skipped: usize,
    replayed: usize,
    penalties: usize,
    last_loss: Option<f64>,
}

fn report(dir: &Path, json: bool) -> Result<()> {
    let dirs = run_dirs(dir)?;
    if dirs.is_empty() {
        bail!("no {REPORT_FILE} or {LEDGER_FILE} under {}", dir.display());
    }
    let mut reports: Vec<MetricsReport> = Vec::new();
    for d in &dirs {
        let path = d.join(REPORT_FILE);
        if path.exists() {
            reports.push(read_report(&path)?);
        }
    }
    let mut out = String::new();
    if json {
        for r in &reports {
            out.push_str(&r.to_json());
        }
        return emit(&out);
    }
    if !reports.is_empty() {
        out.push_str(&render_table(&reports));
    }
    for d in &dirs {
        let path = d.join(LEDGER_FILE);
        if !path.exists() {
            continue;
        }
        let mut stages: BTreeMap<(usize, String), StageSummary> = BTreeMap::new();
        for e in RunLedger::read(&path)? {
            match e {
                LedgerEntry::Step { stage_index, stage, loss, replayed, .. } => {
                    let s = stages.entry((stage_index, stage)).or_default();
                    s.steps += 1;
                    s.replayed += replayed;
                    s.last_loss = Some(loss);
                }
                LedgerEntry::Skip { stage_index, stage, replayed, .. } => {
                    let s = stages.entry((stage_index, stage)).or_default();
                    s.steps += 1;
                    s.skipped += 1;
                    s.replayed += replayed;
                }
                LedgerEntry::Penalty { stage_index, stage, .. } => {
                    stages.entry((stage_index, stage)).or_default().penalties += 1
                }
                _ => {}
            }
        }
        out.push_str(&format!("\nledger {}\n", path.display()));
        out.push_str(&format!(
            "  {:<12} {:>8} {:>8} {:>9} {:>10} {:>10}\n",
            "stage", "steps", "skipped", "replayed", "penalties", "last loss"
        ));
        for ((_, name), s) in &stages {
            let loss = s.last_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.4}"));
            out.push_str(&format!(
                "  {:<12} {:>8} {:>8} {:>9} {:>10} {:>10}\n",
                name, s.steps, s.skipped, s.replayed, s.penalties, loss
            ));
        }
    }
    emit(&out)
}

/// Writes to stdout, treating a closed pipe (`calm report | head`) as success.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
