//! Command-line front end: `train`, `plan`, `verify` and `eval`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use transmamba_core::model::Model;
use transmamba_core::planner::{
    closed_form_optimum, efficiency_curve, optimal_transpoint, reported_comparison, schedule_flops, CostModel,
};
use transmamba_core::schedule::{preset, TransPointSchedule};
use transmamba_core::tasks::TaskKind;
use transmamba_core::train::{evaluate, train, validation_batch, EvalMetrics, StepRecord};
use transmamba_core::verify::{Check, Suite};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TaskSettings};
use crate::error::CliError;
use crate::formats::{append_jsonl, curve_csv, eval_record, metrics_csv, resolve_schedule, schedule_file};
use crate::manifest::{fresh_dir, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "transmamba", version, about = "Shared-weight attention/SSM layers with per-layer transition points")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a synthetic task.
    Train(TrainArgs),
    /// Cost-model sweep and optimal transition point.
    Plan(PlanArgs),
    /// Run equivalence and gradient property suites.
    Verify(VerifyArgs),
    /// Evaluate a checkpoint under other inference schedules.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (key = value lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Schedule name (v1..v9, all-transformer, all-mamba, hybrid), per-layer list, or schedule file.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; must be new or empty.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Sequence length.
    #[arg(long = "T", default_value_t = 8192)]
    pub t: usize,
    /// Hidden width entering the cost formulas.
    #[arg(long = "N", default_value_t = 1536)]
    pub n: usize,
    /// SSM-to-attention per-FLOP cost ratio.
    #[arg(long, default_value_t = 2.67)]
    pub kappa_ratio: f64,
    #[arg(long, default_value_t = 64)]
    pub step: usize,
    /// Output directory for the curve, a suggested schedule and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// duality, converter, gradients, degeneracy, cache, or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Repeatable; `same` means the training schedule.
    #[arg(long = "inference-schedule", default_value = "same")]
    pub inference_schedule: Vec<String>,
    /// Evaluate on another task than the one trained on.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSON-lines file to append the metrics to.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

/// Worker cap from `TM_THREADS` (default 1).
pub fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("TM_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("TM_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

/// Maps `f` over `items` with at most `threads` workers, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn parse_task(s: &str) -> Result<TaskKind, CliError> {
    TaskKind::parse(s).ok_or_else(|| CliError::Config(format!("unknown task `{s}`")))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn metric_records(schedule: &str, task: &str, m: &EvalMetrics) -> Vec<Value> {
    vec![
        eval_record(schedule, task, "loss", m.loss),
        eval_record(schedule, task, "ppl", m.ppl),
        eval_record(schedule, task, "accuracy", m.accuracy),
    ]
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| CliError::io(&a.config, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = a.schedule {
        cfg.schedule = s;
    }
    if let Some(t) = &a.task {
        cfg.task.kind = parse_task(t)?;
    }
    if let Some(n) = a.steps {
        cfg.train.steps = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let spec = cfg.task.spec()?;
    let schedule = resolve_schedule(&cfg.schedule, cfg.task.seq_len, cfg.model.n_layers)?;
    fresh_dir(&a.out)?;
    let manifest = RunManifest::start("train", Some(&a.config), cfg.train.seed, &a.out);
    write(&a.out.join("config.txt"), &cfg.to_text())?;
    write(&a.out.join("schedule.txt"), &schedule_file(&schedule))?;

    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut records: Vec<StepRecord> = Vec::new();
    let result = train(&mut model, &spec, &cfg.train, &schedule, |r| records.push(r.clone()));
    write(&a.out.join("metrics.csv"), &metrics_csv(&records))?;
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            manifest.finish()?;
            return Err(e.into());
        }
    };
    Checkpoint::from_model(&cfg, &model.params).save(&a.out.join("checkpoint.tmam"))?;
    let task = cfg.task.kind.name();
    let mut log = metric_records(&schedule.name, task, &report.validation);
    log.push(eval_record(&schedule.name, task, "initial_loss", report.initial.loss));
    append_jsonl(&a.out.join("run.jsonl"), &log)?;
    manifest.finish()?;
    println!(
        "trained {} steps on {task} under {} {:?}: validation loss {:.4} -> {:.4}, accuracy {:.3}",
        records.len(),
        schedule.name,
        schedule.pattern,
        report.initial.loss,
        report.validation.loss,
        report.validation.accuracy
    );
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Result<(), CliError> {
    if a.t == 0 || a.n == 0 || a.step == 0 {
        return Err(CliError::Usage("--T, --N and --step must be positive".into()));
    }
    let cm = CostModel::with_ratio(a.kappa_ratio).map_err(|e| CliError::Usage(e.to_string()))?;
    let best = optimal_transpoint(a.t, a.n, &cm);
    let curve = efficiency_curve(a.t, a.n, &cm, a.step)?;
    println!("optimal P = {best}");
    println!("closed form = {:.2} (clamped to [0, {}])", closed_form_optimum(a.n, &cm), a.t);
    let suggestion = TransPointSchedule::uniform("layer_shared", best, a.t)?;
    println!("suggested schedule: layer_shared {:?}", suggestion.pattern);
    let v9 = preset("v9", a.t)?;
    println!("flops per layer: transformer {:.4e}, mamba {:.4e}, v9 mean {:.4e}",
        schedule_flops(&TransPointSchedule::uniform("t", a.t, a.t)?, 1, a.n),
        schedule_flops(&TransPointSchedule::uniform("m", 0, a.t)?, 1, a.n),
        schedule_flops(&v9, v9.cycle(), a.n),
    );
    if (a.t, a.n) == (8192, 1536) {
        for row in reported_comparison(&v9) {
            let note = if row.rel_diff() > 0.1 { "  (formula does not reproduce the reported value)" } else { "" };
            println!(
                "  {:<12} formula {:.4e} reported {:.4e} rel diff {:.3}{note}",
                row.label,
                row.formula,
                row.reported,
                row.rel_diff()
            );
        }
    }
    if let Some(out) = &a.out {
        fresh_dir(out)?;
        let manifest = RunManifest::start("plan", None, 0, out);
        write(&out.join("curve.csv"), &curve_csv(&curve))?;
        write(&out.join("schedule.txt"), &schedule_file(&suggestion))?;
        manifest.finish()?;
        println!("wrote {} curve rows to {}", curve.len(), out.join("curve.csv").display());
    }
    Ok(())
}

fn print_checks(suite: Suite, checks: &[Check]) {
    for c in checks {
        println!(
            "[{}] {}: max_dev={:.3e} tol={:.0e} {}",
            suite.name(),
            c.name,
            c.max_dev,
            c.tol,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<(), CliError> {
    let suites: Vec<Suite> = if a.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![Suite::parse(&a.suite).ok_or_else(|| CliError::Usage(format!("unknown suite `{}`", a.suite)))?]
    };
    let results = par_map(&suites, thread_cap()?, |s| s.run(a.seed));
    let mut failed = 0;
    for (suite, r) in suites.iter().zip(results) {
        let checks = r?;
        print_checks(*suite, &checks);
        failed += checks.iter().filter(|c| !c.pass).count();
    }
    if failed > 0 {
        return Err(CliError::PropertyFailure(failed));
    }
    Ok(())
}

/// Default `(seq_len, task vocab)` when evaluating on a task other than the trained one.
fn task_defaults(kind: TaskKind) -> (usize, usize) {
    match kind {
        TaskKind::Copy => (16, 16),
        TaskKind::AssocRecall => (32, 33),
        TaskKind::Phonebook => (80, 128),
        TaskKind::CharLm => (64, 256),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (cfg, model) = ckpt.model::<f32>()?;
    let mut task: TaskSettings = cfg.task.clone();
    if let Some(t) = &a.task {
        let kind = parse_task(t)?;
        if kind != task.kind {
            let (len, vocab) = task_defaults(kind);
            task = TaskSettings {
                kind,
                seq_len: len,
                vocab,
                ..task
            };
        }
    }
    if let Some(n) = a.seq_len {
        task.seq_len = n;
    }
    if let Some(c) = &a.corpus {
        task.corpus = Some(c.clone());
    }
    if task.vocab > model.cfg.vocab {
        return Err(CliError::Config(format!("task vocab {} exceeds model vocab {}", task.vocab, model.cfg.vocab)));
    }
    let spec = task.spec()?;
    let batch = validation_batch(&spec, &cfg.train)?;
    let schedules = a
        .inference_schedule
        .iter()
        .map(|s| {
            let s = if s == "same" { cfg.schedule.as_str() } else { s.as_str() };
            resolve_schedule(s, task.seq_len, model.cfg.n_layers)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let results = par_map(&schedules, thread_cap()?, |s| evaluate(&model, &batch, &s.resolve(model.cfg.n_layers)));
    let mut records = Vec::new();
    for (s, r) in schedules.iter().zip(results) {
        let m = r?;
        if !(m.loss.is_finite() && m.ppl.is_finite()) {
            return Err(CliError::NumericAbort { step: 0, value: m.loss });
        }
        records.extend(metric_records(&s.name, task.kind.name(), &m));
    }
    for r in &records {
        println!("{r}");
    }
    if let Some(log) = &a.log {
        append_jsonl(log, &records)?;
    }
    Ok(())
}
