//! `xheal`: generate traces, run checked simulations, verify snapshots and
//! summarize reports.
//!
//! Exit codes: 0 when every check passes, 1 when a violation is found, 2 on
//! usage, parse or I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use xheal_core::adversary::{decode_trace, encode_trace, gen_trace, Strategy, StrategyKind, Trace};
use xheal_core::engine::{EngineConfig, Fault};
use xheal_core::expander::ExpanderConfig;
use xheal_core::sim::{self, run_strategy, run_trace, SimConfig, SimOutcome};
use xheal_core::{ratio, report, snapshot};

#[derive(Parser)]
#[command(name = "xheal", version, about = "Edge-preserving self-healing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a reproducible trace for a non-adaptive strategy.
    Gen(GenArgs),
    /// Replay a trace (or drive a strategy online) with checks and reports.
    Run(RunArgs),
    /// Re-check a saved healer state.
    Verify(VerifyArgs),
    /// Summarize one or more CSV reports.
    Report(ReportArgs),
}

#[derive(Args)]
struct StrategyArgs {
    #[arg(long, default_value = "uniform")]
    strategy: String,
    #[arg(long, default_value_t = 50)]
    n0: usize,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value = "2/5")]
    insert_fraction: String,
    #[arg(long, default_value_t = 4)]
    insert_degree: usize,
}

impl StrategyArgs {
    fn strategy(&self) -> Result<Strategy, String> {
        let kind: StrategyKind = self.strategy.parse().map_err(|e| format!("{e}"))?;
        let f = ratio::parse(&self.insert_fraction).map_err(|e| format!("--insert-fraction: {e}"))?;
        let s = Strategy::new(kind).with_insert_fraction(f).with_insert_degree(self.insert_degree);
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    strategy: StrategyArgs,
    #[arg(long, default_value_t = 6)]
    kappa: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Cloud degree; defaults to the trace header's value, else 6.
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long, default_value = "1")]
    alpha_target: String,
    #[arg(long, default_value_t = 20)]
    exact_limit: usize,
    #[arg(long, default_value_t = 10)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 100)]
    density_samples: usize,
    #[arg(long, default_value_t = 200)]
    stretch_pairs: usize,
    #[arg(long, default_value_t = 4)]
    stretch_constant: u64,
}

impl CheckArgs {
    fn config(&self, kappa: usize, seed: u64, fault: Option<Fault>) -> Result<SimConfig, String> {
        let alpha = ratio::parse(&self.alpha_target).map_err(|e| format!("--alpha-target: {e}"))?;
        let expander =
            ExpanderConfig { kappa, alpha_target: alpha, exact_limit: self.exact_limit, ..ExpanderConfig::default() };
        let mut engine = EngineConfig::new(expander, seed);
        engine.fault = fault;
        let mut cfg = SimConfig::new(engine);
        cfg.checkpoint_every = self.checkpoint_every;
        cfg.density_samples = self.density_samples;
        cfg.stretch_pairs = self.stretch_pairs;
        cfg.stretch_constant = self.stretch_constant;
        cfg.exact_limit = self.exact_limit;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Trace to replay; without it the strategy flags drive the run.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[command(flatten)]
    check: CheckArgs,
    /// Engine seed; repeat for several independent runs.
    #[arg(long)]
    seed: Vec<u64>,
    /// CSV report path. With several seeds, `-seed<N>` is added to the stem.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Optional JSON-lines copy of the report.
    #[arg(long)]
    jsonl: Option<PathBuf>,
    /// Write the final healer state here.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Write the executed trace here (useful for adaptive strategies).
    #[arg(long)]
    save_trace: Option<PathBuf>,
    #[arg(long)]
    fault: Option<Fault>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    snapshot: PathBuf,
    /// Trace whose prefix produced the snapshot; replayed and compared.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    check: CheckArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

enum Failure {
    Usage(String),
    Violations,
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Usage(s)
    }
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn with_seed(path: &Path, seed: u64, many: bool) -> PathBuf {
    if !many {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    path.with_file_name(name)
}

fn cmd_gen(a: &GenArgs) -> Result<(), Failure> {
    let s = a.strategy.strategy()?;
    let trace = gen_trace(&s, a.kappa, a.strategy.n0, a.strategy.steps, a.seed).map_err(|e| e.to_string())?;
    write(&a.out, &encode_trace(&trace))?;
    Ok(())
}

enum Source {
    Trace(Trace),
    Online(Strategy),
}

fn run_one(a: &RunArgs, source: &Source, seed: u64) -> Result<SimOutcome, String> {
    match source {
        Source::Trace(t) => {
            let cfg = a.check.config(a.check.kappa.unwrap_or(t.header.kappa), seed, a.fault)?;
            run_trace(cfg, t).map_err(|e| e.to_string())
        }
        Source::Online(s) => {
            let cfg = a.check.config(a.check.kappa.unwrap_or(6), seed, a.fault)?;
            run_strategy(cfg, s, a.strategy.n0, a.strategy.steps).map_err(|e| e.to_string())
        }
    }
}

fn cmd_run(a: &RunArgs) -> Result<(), Failure> {
    let source = match &a.trace {
        Some(p) => Source::Trace(decode_trace(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?),
        None => Source::Online(a.strategy.strategy()?),
    };
    let seeds = match (&source, a.seed.is_empty()) {
        (Source::Trace(t), true) => vec![t.header.seed],
        (_, true) => vec![0],
        _ => a.seed.clone(),
    };
    let many = seeds.len() > 1;

    let results: Vec<Mutex<Option<Result<SimOutcome, String>>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.clamp(1, seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let r = run_one(a, &source, seeds[i]);
                *results[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });

    let mut failed = false;
    for (seed, slot) in seeds.iter().zip(results) {
        let out = slot.into_inner().expect("unpoisoned").expect("every seed ran")?;
        if let Some(p) = &a.out {
            write(&with_seed(p, *seed, many), &report::to_csv(&out.reports))?;
        }
        if let Some(p) = &a.jsonl {
            write(&with_seed(p, *seed, many), &report::to_jsonl(&out.reports))?;
        }
        if let Some(p) = &a.snapshot {
            write(&with_seed(p, *seed, many), &snapshot::dump(&out.state))?;
        }
        if let Some(p) = &a.save_trace {
            write(&with_seed(p, *seed, many), &encode_trace(&out.trace))?;
        }
        print!("{}", report::summarize(&format!("seed {seed}"), &out.reports));
        if !out.passed() {
            failed = true;
            eprintln!("seed {seed}: {} violations", out.violations.len());
            for v in out.violations.iter().take(20) {
                eprintln!("  {v}");
            }
            if out.violations.len() > 20 {
                eprintln!("  ...");
            }
        }
    }
    if failed {
        Err(Failure::Violations)
    } else {
        Ok(())
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<(), Failure> {
    let text = read(&a.snapshot)?;
    let state = snapshot::load(&text).map_err(|e| format!("{}: {e}", a.snapshot.display()))?;
    let mut problems: Vec<String> = Vec::new();

    if let Some(p) = &a.trace {
        let trace = decode_trace(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))?;
        let t = state.time() as usize;
        if t > trace.events.len() {
            return Err(format!("snapshot is at t={t} but the trace has {} events", trace.events.len()).into());
        }
        let mut prefix = trace.clone();
        prefix.events.truncate(t);
        let cfg = a.check.config(state.kappa(), state.config().seed, state.config().fault)?;
        let replay = run_trace(cfg, &prefix).map_err(|e| e.to_string())?;
        if replay.state.graph() != state.graph() {
            problems.push("replayed graph differs from snapshot".into());
        }
        if replay.state.shadow() != state.shadow() {
            problems.push("replayed shadow graph differs from snapshot".into());
        }
        if replay.state.registry() != state.registry() {
            problems.push("replayed cloud registry differs from snapshot".into());
        }
    }

    let cfg = a.check.config(state.kappa(), state.config().seed, None)?;
    let mut rng = sim::metric_rng(state.config().seed);
    let (row, violations) = sim::evaluate(&state, &cfg, &mut rng);
    problems.extend(violations.iter().map(|v| v.to_string()));

    println!(
        "t={} n_alive={} connectivity={} coherence={} preservation={}",
        row.t,
        row.n_alive,
        row.connectivity.as_str(),
        if row.coherence_ok { "ok" } else { "mismatch" },
        if row.edge_preservation_ok { "ok" } else { "violated" },
    );
    if problems.is_empty() {
        return Ok(());
    }
    for p in &problems {
        eprintln!("{p}");
    }
    Err(Failure::Violations)
}

fn cmd_report(a: &ReportArgs) -> Result<(), Failure> {
    let mut files = a.files.clone();
    files.sort();
    let mut blocks = Vec::new();
    for f in &files {
        let rows = report::from_csv(&read(f)?).map_err(|e| format!("{}: {e}", f.display()))?;
        blocks.push(report::summarize(&f.display().to_string(), &rows));
    }
    print!("{}", blocks.join("\n"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violations) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
