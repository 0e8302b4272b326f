//! Command-line front end: runs searches and baselines, resumes or extends
//! interrupted runs, and renders reports from their trace logs.
//!
//! Exit codes: 0 for completed and frontier-exhausted runs, 2 for usage and
//! configuration errors, 3 for infrastructure aborts, 4 for backend aborts.

mod landscape_gen;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use plansearch::baseline::{run_baseline, BaselineConfig};
use plansearch::engine::{self, EngineConfig, EngineError, RunResult};
use plansearch::eval::landscape::Landscape;
use plansearch::report::{
    best_so_far_curve, curves_csv, export_tree, fast_p_csv, fast_p_table, speedup_csv,
    CurvePoint, ExportFormat, FastPTable,
};
use plansearch::rundir::{
    build_coder, build_mutator, build_planner, finalize, load_evaluator_override,
    prepare_resume, ResumePrep, RunLock, SUMMARY_FILE,
};
use plansearch::task::Task;
use plansearch::trace::replay::restore;
use plansearch::trace::{scan_log, ClockMode, TraceRecord, TraceWriter, TRACE_FILE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "plansearch",
    version,
    about = "Budgeted tree search over program-optimization hypotheses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search on a task file into a fresh run directory.
    Run(RunArgs),
    /// Continue an interrupted run, optionally extending its budget.
    Resume(ResumeArgs),
    /// Run the evolutionary-sampling baseline on a task file.
    Baseline(BaselineArgs),
    /// Summarize one or more run directories (curves, Fast_p, speedups).
    Report(ReportArgs),
    /// Render a run's hypothesis tree.
    ExportTree(ExportTreeArgs),
    /// Generate a seeded synthetic landscape plus its oracle optimum.
    MakeLandscape(MakeLandscapeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Task description file (TOML).
    task_file: PathBuf,
    /// Run directory to create (must not already hold a run).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation budget B: total evaluator invocations allowed.
    #[arg(long)]
    budget: Option<u32>,
    /// Stagnation threshold K: consecutive non-improving attempts that
    /// close a refinement.
    #[arg(long)]
    stagnation: Option<u32>,
    /// Re-prompts allowed per planner call on malformed responses.
    #[arg(long)]
    retries: Option<u32>,
    /// Whether the previous attempt's outcome is fed to the next one.
    #[arg(long)]
    feedback: Option<bool>,
    /// Seed recorded for sampling backends.
    #[arg(long)]
    seed: Option<u64>,
    /// Planner backend: scripted:<file> or llm:<file>.
    #[arg(long)]
    planner: Option<String>,
    /// Coder backend: scripted or llm:<file>.
    #[arg(long)]
    coder: Option<String>,
    /// Evaluator override file (TOML in the shape of a task's [evaluator]
    /// table); replaces the task's evaluator for this run.
    #[arg(long)]
    evaluator: Option<PathBuf>,
    /// Timestamp source: system or logical.
    #[arg(long)]
    clock: Option<String>,
    /// TOML file supplying defaults for any flag above; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Final summary format: text or structured.
    #[arg(long, default_value = "text")]
    format: String,
}

/// Config-file mirror of the run flags. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    budget: Option<u32>,
    stagnation: Option<u32>,
    retries: Option<u32>,
    feedback: Option<bool>,
    seed: Option<u64>,
    planner: Option<String>,
    coder: Option<String>,
    evaluator: Option<PathBuf>,
    out: Option<PathBuf>,
    clock: Option<String>,
}

#[derive(Args)]
struct ResumeArgs {
    /// Run directory of an interrupted or completed run.
    run_dir: PathBuf,
    /// Extra evaluation budget to grant; required to continue a run that
    /// already completed by exhausting its budget.
    #[arg(long, default_value_t = 0)]
    add_budget: u32,
    /// Replace the recorded planner backend for the continuation.
    #[arg(long)]
    planner: Option<String>,
    /// Replace the recorded coder backend for the continuation.
    #[arg(long)]
    coder: Option<String>,
    /// Evaluator override file; replaces the recorded evaluator for the
    /// continuation (the original task record is left untouched).
    #[arg(long)]
    evaluator: Option<PathBuf>,
    /// Final summary format: text or structured.
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args)]
struct BaselineArgs {
    /// Task description file (TOML).
    task_file: PathBuf,
    /// Run directory to create (must not already hold a run).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation budget: total evaluator invocations allowed.
    #[arg(long)]
    budget: Option<u32>,
    /// Archive capacity (best-scoring candidates kept as parents).
    #[arg(long)]
    archive_capacity: Option<usize>,
    /// Parents sampled per mutation prompt.
    #[arg(long)]
    parents: Option<usize>,
    /// Probability of uniform (rather than score-weighted) parent draws.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Seed for parent sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Mutator backend: scripted:<file> or llm:<file>.
    #[arg(long)]
    mutator: Option<String>,
    /// Evaluator override file; replaces the task's evaluator.
    #[arg(long)]
    evaluator: Option<PathBuf>,
    /// Timestamp source: system or logical.
    #[arg(long)]
    clock: Option<String>,
    /// TOML file supplying defaults for any flag above; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Final summary format: text or structured.
    #[arg(long, default_value = "text")]
    format: String,
}

/// Config-file mirror of the baseline flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineFile {
    budget: Option<u32>,
    archive_capacity: Option<usize>,
    parents: Option<usize>,
    epsilon: Option<f64>,
    seed: Option<u64>,
    mutator: Option<String>,
    evaluator: Option<PathBuf>,
    out: Option<PathBuf>,
    clock: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more run directories to summarize.
    #[arg(required = true)]
    run_dirs: Vec<PathBuf>,
    /// Comma-separated speedup thresholds for Fast_p columns.
    #[arg(long, default_value = "1.0")]
    fastp: String,
    /// Output format: text, structured, or csv.
    #[arg(long, default_value = "text")]
    format: String,
    /// Directory for CSV files (csv format only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportTreeArgs {
    /// Run directory of an engine run (finished or not).
    run_dir: PathBuf,
    /// Output format: graph-dot or structured.
    #[arg(long, default_value = "graph-dot")]
    format: String,
}

#[derive(Args)]
struct MakeLandscapeArgs {
    /// Number of directives in the vocabulary (2 to 16).
    #[arg(long, default_value_t = 6)]
    directives: usize,
    /// Generation seed; same seed and size reproduce the file exactly.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Landscape TOML to write; the oracle optimum goes to a
    /// `.optimum.json` sidecar next to it.
    #[arg(long)]
    out: PathBuf,
    /// Summary format: text or structured.
    #[arg(long, default_value = "text")]
    format: String,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Resume(args) => cmd_resume(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Report(args) => cmd_report(args),
        Command::ExportTree(args) => cmd_export_tree(args),
        Command::MakeLandscape(args) => cmd_make_landscape(args),
    }
}

// ---------------------------------------------------------------- run

fn cmd_run(args: RunArgs) -> Result<i32> {
    let format = parse_summary_format(&args.format)?;
    let (file, base) = match &args.config {
        Some(path) => load_config::<RunFile>(path)?,
        None => (RunFile::default(), PathBuf::from(".")),
    };
    let defaults = EngineConfig::default();
    let config = EngineConfig {
        budget_b: args.budget.or(file.budget).unwrap_or(defaults.budget_b),
        stagnation_k: args
            .stagnation
            .or(file.stagnation)
            .unwrap_or(defaults.stagnation_k),
        planner_retries_r: args
            .retries
            .or(file.retries)
            .unwrap_or(defaults.planner_retries_r),
        feedback_on_retry: args
            .feedback
            .or(file.feedback)
            .unwrap_or(defaults.feedback_on_retry),
        rng_seed: args.seed.or(file.seed).unwrap_or(defaults.rng_seed),
    };
    config.validate().map_err(|e| anyhow::anyhow!(e))?;
    let planner_spec = args
        .planner
        .or_else(|| file.planner.map(|s| resolve_spec(&base, s)))
        .context("no planner configured; pass --planner or set `planner` in the config file")?;
    let coder_spec = args
        .coder
        .or_else(|| file.coder.map(|s| resolve_spec(&base, s)))
        .context("no coder configured; pass --coder or set `coder` in the config file")?;
    let out = args
        .out
        .or_else(|| file.out.map(|p| resolve_path(&base, p)))
        .context("no run directory; pass --out or set `out` in the config file")?;
    let clock = parse_clock(args.clock.or(file.clock))?;

    let mut task = Task::load(&args.task_file)
        .map_err(|e| anyhow::anyhow!("task {}: {e}", args.task_file.display()))?;
    let evaluator_file = args
        .evaluator
        .or_else(|| file.evaluator.map(|p| resolve_path(&base, p)));
    if let Some(path) = evaluator_file {
        task.evaluator = load_evaluator_override(&path)?;
        task.validate().map_err(|e| anyhow::anyhow!(e))?;
    }

    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating run directory {}", out.display()))?;
    let lock = RunLock::acquire(&out)?;
    let mut trace = TraceWriter::create(&out, clock)?;
    let mut planner = build_planner(&planner_spec)?;
    let mut coder = build_coder(&coder_spec)?;
    let mut evaluator = plansearch::eval::build_evaluator(&task)?;

    let result = match engine::run(
        &task,
        config,
        planner.as_mut(),
        coder.as_mut(),
        evaluator.as_mut(),
        &mut trace,
    ) {
        Ok(result) => result,
        Err(EngineError::Config(msg)) => bail!("invalid engine config: {msg}"),
        Err(e) => return abort(&lock, &e),
    };
    finalize(&out, &task.task_id, &result)?;
    emit_summary(&out, &result, format)?;
    drop(lock);
    Ok(result.exit_status.exit_code())
}

// ---------------------------------------------------------------- resume

fn cmd_resume(args: ResumeArgs) -> Result<i32> {
    let format = parse_summary_format(&args.format)?;
    let lock = RunLock::acquire(&args.run_dir)?;
    let (fold, mut writer) = match prepare_resume(&lock, args.add_budget)? {
        ResumePrep::AlreadyFinished { status } => {
            println!(
                "run already ended ({status}); use --add-budget to extend a completed run"
            );
            return Ok(0);
        }
        ResumePrep::Continue {
            fold,
            writer,
            dropped_tail,
        } => {
            if dropped_tail {
                log::warn!("dropped a torn trailing log line");
            }
            (fold, writer)
        }
    };

    let mut task = fold.task.clone();
    if let Some(path) = &args.evaluator {
        task.evaluator = load_evaluator_override(path)?;
        task.validate().map_err(|e| anyhow::anyhow!(e))?;
    }
    let planner_spec = args
        .planner
        .clone()
        .or_else(|| fold.config.planner.clone())
        .context("run records no planner spec; pass --planner")?;
    let coder_spec = args
        .coder
        .clone()
        .or_else(|| fold.config.coder.clone())
        .context("run records no coder spec; pass --coder")?;
    let mut planner = build_planner(&planner_spec)?;
    let mut coder = build_coder(&coder_spec)?;
    let mut evaluator = plansearch::eval::build_evaluator(&task)?;

    let result = match engine::resume(
        fold,
        &task,
        planner.as_mut(),
        coder.as_mut(),
        evaluator.as_mut(),
        &mut writer,
    ) {
        Ok(result) => result,
        Err(EngineError::Config(msg)) => bail!("invalid engine config: {msg}"),
        Err(e) => return abort(&lock, &e),
    };
    finalize(&args.run_dir, &task.task_id, &result)?;
    emit_summary(&args.run_dir, &result, format)?;
    drop(lock);
    Ok(result.exit_status.exit_code())
}

// ---------------------------------------------------------------- baseline

fn cmd_baseline(args: BaselineArgs) -> Result<i32> {
    let format = parse_summary_format(&args.format)?;
    let (file, base) = match &args.config {
        Some(path) => load_config::<BaselineFile>(path)?,
        None => (BaselineFile::default(), PathBuf::from(".")),
    };
    let defaults = BaselineConfig::default();
    let config = BaselineConfig {
        budget: args.budget.or(file.budget).unwrap_or(defaults.budget),
        archive_capacity: args
            .archive_capacity
            .or(file.archive_capacity)
            .unwrap_or(defaults.archive_capacity),
        parents_per_step: args
            .parents
            .or(file.parents)
            .unwrap_or(defaults.parents_per_step),
        epsilon: args.epsilon.or(file.epsilon).unwrap_or(defaults.epsilon),
        rng_seed: args.seed.or(file.seed).unwrap_or(defaults.rng_seed),
    };
    config.validate().map_err(|e| anyhow::anyhow!(e))?;
    let mutator_spec = args
        .mutator
        .or_else(|| file.mutator.map(|s| resolve_spec(&base, s)))
        .context("no mutator configured; pass --mutator or set `mutator` in the config file")?;
    let out = args
        .out
        .or_else(|| file.out.map(|p| resolve_path(&base, p)))
        .context("no run directory; pass --out or set `out` in the config file")?;
    let clock = parse_clock(args.clock.or(file.clock))?;

    let mut task = Task::load(&args.task_file)
        .map_err(|e| anyhow::anyhow!("task {}: {e}", args.task_file.display()))?;
    let evaluator_file = args
        .evaluator
        .or_else(|| file.evaluator.map(|p| resolve_path(&base, p)));
    if let Some(path) = evaluator_file {
        task.evaluator = load_evaluator_override(&path)?;
        task.validate().map_err(|e| anyhow::anyhow!(e))?;
    }

    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating run directory {}", out.display()))?;
    let lock = RunLock::acquire(&out)?;
    let mut trace = TraceWriter::create(&out, clock)?;
    let mut mutator = build_mutator(&mutator_spec)?;
    let mut evaluator = plansearch::eval::build_evaluator(&task)?;

    let result = match run_baseline(
        &task,
        config,
        mutator.as_mut(),
        evaluator.as_mut(),
        &mut trace,
    ) {
        Ok(result) => result,
        Err(EngineError::Config(msg)) => bail!("invalid baseline config: {msg}"),
        Err(e) => return abort(&lock, &e),
    };
    finalize(&out, &task.task_id, &result)?;
    emit_summary(&out, &result, format)?;
    drop(lock);
    Ok(result.exit_status.exit_code())
}

// ---------------------------------------------------------------- report

#[derive(Serialize)]
struct RunReportDoc {
    label: String,
    best_program_id: plansearch::tree::ProgramId,
    best_score: f64,
    /// Parallel to the document's thresholds.
    fast_p: Vec<f64>,
    speedups: Vec<(String, f64)>,
    curve: Vec<CurvePoint>,
}

#[derive(Serialize)]
struct ReportDoc {
    thresholds: Vec<f64>,
    runs: Vec<RunReportDoc>,
}

fn cmd_report(args: ReportArgs) -> Result<i32> {
    let thresholds = parse_thresholds(&args.fastp)?;
    let mut scans: Vec<(String, Vec<TraceRecord>)> = Vec::new();
    for dir in &args.run_dirs {
        let scan = scan_log(&dir.join(TRACE_FILE))
            .map_err(|e| anyhow::anyhow!("run {}: {e}", dir.display()))?;
        scans.push((label_of(dir), scan.records));
    }
    let borrowed: Vec<(String, &[TraceRecord])> = scans
        .iter()
        .map(|(label, records)| (label.clone(), records.as_slice()))
        .collect();
    let table = fast_p_table(&borrowed, &thresholds).map_err(|e| anyhow::anyhow!(e))?;
    let curves: Vec<(String, Vec<CurvePoint>)> = scans
        .iter()
        .map(|(label, records)| {
            best_so_far_curve(records)
                .map(|curve| (label.clone(), curve))
                .map_err(|e| anyhow::anyhow!("run {label}: {e}"))
        })
        .collect::<Result<_>>()?;

    match args.format.as_str() {
        "text" => print_text_report(&table, &curves),
        "structured" => {
            let doc = ReportDoc {
                thresholds: table.thresholds.clone(),
                runs: table
                    .rows
                    .iter()
                    .zip(&curves)
                    .map(|(row, (_, curve))| RunReportDoc {
                        label: row.label.clone(),
                        best_program_id: row.best_program_id,
                        best_score: row.best_score,
                        fast_p: row.fast_p.clone(),
                        speedups: row.speedups.clone(),
                        curve: curve.clone(),
                    })
                    .collect(),
            };
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        "csv" => {
            let out = args
                .out
                .as_ref()
                .context("csv format needs --out <dir> for the generated files")?;
            std::fs::create_dir_all(out)
                .with_context(|| format!("creating {}", out.display()))?;
            let files = [
                ("best_so_far.csv", curves_csv(&curves)),
                ("fast_p.csv", fast_p_csv(&table)),
                ("speedups.csv", speedup_csv(&table)),
            ];
            for (name, content) in files {
                let path = out.join(name);
                std::fs::write(&path, content)
                    .with_context(|| format!("writing {}", path.display()))?;
                println!("wrote {}", path.display());
            }
        }
        other => bail!("unknown report format {other:?}; expected text, structured, or csv"),
    }
    Ok(0)
}

fn print_text_report(table: &FastPTable, curves: &[(String, Vec<CurvePoint>)]) {
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec![
        "run".to_owned(),
        "rounds".to_owned(),
        "best".to_owned(),
        "score".to_owned(),
    ];
    header.extend(table.thresholds.iter().map(|t| format!("fast_p@{t}")));
    grid.push(header);
    for (row, (_, curve)) in table.rows.iter().zip(curves) {
        let mut cells = vec![
            row.label.clone(),
            curve.len().to_string(),
            row.best_program_id.to_string(),
            row.best_score.to_string(),
        ];
        cells.extend(row.fast_p.iter().map(|v| v.to_string()));
        grid.push(cells);
    }
    let columns = grid[0].len();
    let widths: Vec<usize> = (0..columns)
        .map(|c| grid.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    for row in &grid {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, width)| format!("{cell:<width$}"))
            .collect();
        println!("{}", line.join("  ").trim_end());
    }
    for row in &table.rows {
        let parts: Vec<String> = row
            .speedups
            .iter()
            .map(|(w, s)| format!("{w} {s}"))
            .collect();
        println!(
            "speedups {} ({}): {}",
            row.label,
            row.best_program_id,
            parts.join(", ")
        );
    }
}

// ---------------------------------------------------------------- export-tree

fn cmd_export_tree(args: ExportTreeArgs) -> Result<i32> {
    let format: ExportFormat = args.format.parse().map_err(|e: String| anyhow::anyhow!(e))?;
    let restored = restore(&args.run_dir)
        .map_err(|e| anyhow::anyhow!("run {}: {e}", args.run_dir.display()))?;
    print!("{}", export_tree(&restored.fold.state, format));
    Ok(0)
}

// ---------------------------------------------------------------- make-landscape

#[derive(Serialize)]
struct OptimumSidecar {
    /// Reference latencies assumed by the oracle: half the base latency
    /// of each workload.
    p_ref_us: BTreeMap<String, f64>,
    best_directives: Vec<String>,
    best_score: f64,
    best_latency_us: BTreeMap<String, f64>,
}

fn cmd_make_landscape(args: MakeLandscapeArgs) -> Result<i32> {
    let format = parse_summary_format(&args.format)?;
    let landscape = landscape_gen::generate(args.directives, args.seed)?;
    let header = format!(
        "# synthetic optimization landscape: {} directives, seed {}\n",
        args.directives, args.seed
    );
    let body = toml::to_string_pretty(&landscape).context("serializing landscape")?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(&args.out, format!("{header}{body}"))
        .with_context(|| format!("writing {}", args.out.display()))?;

    // The sidecar is computed from a reload of the written file so it
    // describes exactly what a consumer will parse.
    let reloaded = Landscape::load(&args.out).map_err(|e| anyhow::anyhow!(e))?;
    let p_refs: BTreeMap<String, f64> = reloaded
        .base_us
        .iter()
        .map(|(k, v)| (k.clone(), v / 2.0))
        .collect();
    let (best_set, best_score) = reloaded.optimum(&p_refs);
    let best_latency_us: BTreeMap<String, f64> = reloaded
        .base_us
        .keys()
        .map(|w| {
            let latency = reloaded
                .latency_us(&best_set, w)
                .expect("optimum set is valid");
            (w.clone(), latency)
        })
        .collect();
    let sidecar = OptimumSidecar {
        p_ref_us: p_refs,
        best_directives: best_set.into_iter().collect(),
        best_score,
        best_latency_us,
    };
    let sidecar_path = args.out.with_extension("optimum.json");
    let mut sidecar_json = serde_json::to_string_pretty(&sidecar)?;
    sidecar_json.push('\n');
    std::fs::write(&sidecar_path, sidecar_json)
        .with_context(|| format!("writing {}", sidecar_path.display()))?;

    match format {
        SummaryFormat::Text => {
            println!("wrote {}", args.out.display());
            println!("wrote {}", sidecar_path.display());
            println!(
                "optimum: [{}] score {}",
                sidecar.best_directives.join(", "),
                sidecar.best_score
            );
        }
        SummaryFormat::Structured => {
            let doc = serde_json::json!({
                "landscape": args.out,
                "sidecar": sidecar_path,
                "optimum": sidecar,
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------- shared

#[derive(Clone, Copy, PartialEq, Eq)]
enum SummaryFormat {
    Text,
    Structured,
}

fn parse_summary_format(s: &str) -> Result<SummaryFormat> {
    match s {
        "text" => Ok(SummaryFormat::Text),
        "structured" => Ok(SummaryFormat::Structured),
        other => bail!("unknown format {other:?}; expected text or structured"),
    }
}

fn parse_clock(value: Option<String>) -> Result<ClockMode> {
    match value {
        None => Ok(ClockMode::default()),
        Some(s) => s.parse::<ClockMode>().map_err(|e| anyhow::anyhow!(e)),
    }
}

fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let mut thresholds = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        let value: f64 = part
            .parse()
            .with_context(|| format!("bad Fast_p threshold {part:?}"))?;
        if !value.is_finite() || value <= 0.0 {
            bail!("Fast_p threshold must be a positive number, got {part:?}");
        }
        thresholds.push(value);
    }
    Ok(thresholds)
}

/// Loads a TOML config file, returning it with its directory (the base
/// for resolving any relative paths it contains).
fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, PathBuf)> {
    let canon = path
        .canonicalize()
        .with_context(|| format!("config file {}", path.display()))?;
    let text = std::fs::read_to_string(&canon)
        .with_context(|| format!("config file {}", canon.display()))?;
    let parsed: T = toml::from_str(&text)
        .with_context(|| format!("config file {}", canon.display()))?;
    let base = canon
        .parent()
        .expect("canonical file path has a parent")
        .to_path_buf();
    Ok((parsed, base))
}

fn resolve_path(base: &Path, path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

/// Resolves the path part of a `kind:path` backend spec against `base`.
fn resolve_spec(base: &Path, spec: String) -> String {
    match spec.split_once(':') {
        Some((kind, path)) if !path.is_empty() && !Path::new(path).is_absolute() => {
            format!("{kind}:{}", base.join(path).display())
        }
        _ => spec,
    }
}

fn label_of(dir: &Path) -> String {
    dir.file_name()
        .map(|name| name.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// An abort left no RunEnded behind; report it and exit 3 so the caller
/// can distinguish "retry me" from a finished run.
fn abort(lock: &RunLock, error: &EngineError) -> Result<i32> {
    eprintln!(
        "error: run in {} aborted: {error}",
        lock.run_dir().display()
    );
    Ok(3)
}

fn emit_summary(run_dir: &Path, result: &RunResult, format: SummaryFormat) -> Result<()> {
    match format {
        SummaryFormat::Text => {
            println!("status: {}", result.exit_status);
            match (&result.best_program_id, result.best_score) {
                (Some(id), Some(score)) => println!("best:   {id} score {score}"),
                _ => println!("best:   none"),
            }
            println!(
                "rounds: {} used, {} remaining",
                result.rounds_used, result.budget_remaining
            );
            println!("run dir: {}", run_dir.display());
        }
        SummaryFormat::Structured => {
            // The summary file is the canonical structured form.
            let text = std::fs::read_to_string(run_dir.join(SUMMARY_FILE))?;
            print!("{text}");
        }
    }
    Ok(())
}
