//! Run-directory lifecycle: the lock protocol, backend wiring from spec
//! strings, result finalization, and the resume workflow including budget
//! extension.
//!
//! Layout of a run directory:
//!
//! ```text
//! run.lock        owner pid; stale locks from dead processes are reclaimed
//! run.log         the event log (one JSON record per line)
//! snapshots/      periodic state snapshots for fast restore
//! blobs/          content-addressed raw LLM exchanges
//! overrides.json  post-hoc budget extensions (see trace::Overrides)
//! work/           evaluator scratch space
//! best/           files of the best program, written at finalization
//! result.summary  final outcome as a single JSON document
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::baseline::{LlmMutator, ProgramMutator, ScriptedMutator};
use crate::coder::llm::LlmCoder;
use crate::coder::scripted::ScriptedCoder;
use crate::coder::Coder;
use crate::engine::RunResult;
use crate::planner::llm::LlmPlanner;
use crate::planner::scripted::ScriptedPlanner;
use crate::planner::Planner;
use crate::trace::replay::{restore, FoldResult, Pending, RestoredRun};
use crate::trace::{
    record_extension, BudgetExtension, ExitStatus, RunMode, TraceError, TraceEvent, TraceRecord,
    TraceWriter, TRACE_FILE,
};

pub const LOCK_FILE: &str = "run.lock";
pub const SUMMARY_FILE: &str = "result.summary";
pub const BEST_DIR: &str = "best";
pub const WORK_DIR: &str = "work";

/// Exclusive ownership of a run directory, held for the duration of a run
/// or resume. The lock file records the owner pid; a lock whose process is
/// gone is reclaimed automatically.
#[derive(Debug)]
pub struct RunLock {
    run_dir: PathBuf,
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<RunLock, TraceError> {
        std::fs::create_dir_all(run_dir)?;
        let path = run_dir.join(LOCK_FILE);
        for _ in 0..2 {
            match std::fs::OpenOptions::new().create_new(true).write(true).open(&path) {
                Ok(mut file) => {
                    writeln!(file, "{}", std::process::id())?;
                    return Ok(RunLock {
                        run_dir: run_dir.to_owned(),
                        path,
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = std::fs::read_to_string(&path).unwrap_or_default();
                    match holder.trim().parse::<u32>() {
                        Ok(pid) if pid_alive(pid) => {
                            return Err(TraceError::Locked(format!(
                                "{} is held by live process {pid}",
                                path.display()
                            )));
                        }
                        _ => {
                            // Dead owner or garbage: reclaim and retry once.
                            std::fs::remove_file(&path)?;
                        }
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(TraceError::Locked(format!(
            "{} could not be acquired",
            path.display()
        )))
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn pid_alive(pid: u32) -> bool {
    if pid == std::process::id() {
        return true;
    }
    Path::new("/proc").join(pid.to_string()).exists()
}

/// Builds a planner from a spec string: `scripted:<rules.toml>` or
/// `llm:<config.toml>`. Paths are made absolute so specs recorded in the
/// trace stay valid when resumed from another directory.
pub fn build_planner(spec: &str) -> Result<Box<dyn Planner>, TraceError> {
    match split_spec(spec)? {
        ("scripted", Some(path)) => Ok(Box::new(
            ScriptedPlanner::load(&absolute(path)?).map_err(TraceError::Invalid)?,
        )),
        ("llm", Some(path)) => Ok(Box::new(
            LlmPlanner::load(&absolute(path)?).map_err(TraceError::Invalid)?,
        )),
        _ => Err(TraceError::Invalid(format!(
            "planner spec {spec:?}: expected scripted:<rules.toml> or llm:<config.toml>"
        ))),
    }
}

/// Builds a coder from a spec string: `scripted` or `llm:<config.toml>`.
pub fn build_coder(spec: &str) -> Result<Box<dyn Coder>, TraceError> {
    match split_spec(spec)? {
        ("scripted", None) => Ok(Box::new(ScriptedCoder::new())),
        ("llm", Some(path)) => Ok(Box::new(
            LlmCoder::load(&absolute(path)?).map_err(TraceError::Invalid)?,
        )),
        _ => Err(TraceError::Invalid(format!(
            "coder spec {spec:?}: expected scripted or llm:<config.toml>"
        ))),
    }
}

/// Builds a baseline mutator from a spec string: `scripted:<list.toml>` or
/// `llm:<config.toml>`.
pub fn build_mutator(spec: &str) -> Result<Box<dyn ProgramMutator>, TraceError> {
    match split_spec(spec)? {
        ("scripted", Some(path)) => Ok(Box::new(
            ScriptedMutator::load(&absolute(path)?).map_err(TraceError::Invalid)?,
        )),
        ("llm", Some(path)) => Ok(Box::new(
            LlmMutator::load(&absolute(path)?).map_err(TraceError::Invalid)?,
        )),
        _ => Err(TraceError::Invalid(format!(
            "mutator spec {spec:?}: expected scripted:<list.toml> or llm:<config.toml>"
        ))),
    }
}

fn split_spec(spec: &str) -> Result<(&str, Option<&str>), TraceError> {
    match spec.split_once(':') {
        Some((kind, path)) if !path.is_empty() => Ok((kind, Some(path))),
        Some((_, _)) => Err(TraceError::Invalid(format!(
            "backend spec {spec:?} has an empty path"
        ))),
        None => Ok((spec, None)),
    }
}

fn absolute(path: &str) -> Result<PathBuf, TraceError> {
    let p = Path::new(path);
    p.canonicalize().map_err(|e| {
        TraceError::Invalid(format!("backend config {}: {e}", p.display()))
    })
}

/// Loads an evaluator override file: a TOML document in the shape of a
/// task's `[evaluator]` table. A referenced landscape is inlined relative
/// to the file, as task loading would do.
pub fn load_evaluator_override(path: &Path) -> Result<crate::task::EvaluatorConfig, TraceError> {
    use crate::eval::landscape::Landscape;
    use crate::task::{EvaluatorConfig, LandscapeSource};
    let path = path
        .canonicalize()
        .map_err(|e| TraceError::Invalid(format!("evaluator override {}: {e}", path.display())))?;
    let text = std::fs::read_to_string(&path)?;
    let mut config: EvaluatorConfig = toml::from_str(&text)
        .map_err(|e| TraceError::Invalid(format!("evaluator override {}: {e}", path.display())))?;
    if let EvaluatorConfig::SyntheticLandscape { landscape, .. } = &mut config {
        if let LandscapeSource::Path(p) = landscape {
            let dir = path.parent().expect("canonical file path has a parent");
            let full = if p.is_absolute() { p.clone() } else { dir.join(&*p) };
            let inline = Landscape::load(&full)
                .map_err(|e| TraceError::Invalid(format!("landscape {}: {e}", full.display())))?;
            *landscape = LandscapeSource::Inline(inline);
        }
    }
    Ok(config)
}

#[derive(Serialize)]
struct ResultSummary<'a> {
    task_id: &'a str,
    exit_status: ExitStatus,
    exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_program_id: Option<crate::tree::ProgramId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_score: Option<f64>,
    rounds_used: u32,
    budget_remaining: u32,
}

/// Writes `result.summary` and materializes the best program's files under
/// `best/`. Safe to call again after a resume; contents are replaced.
pub fn finalize(run_dir: &Path, task_id: &str, result: &RunResult) -> Result<(), TraceError> {
    let summary = ResultSummary {
        task_id,
        exit_status: result.exit_status,
        exit_code: result.exit_status.exit_code(),
        best_program_id: result.best_program_id,
        best_score: result.best_score,
        rounds_used: result.rounds_used,
        budget_remaining: result.budget_remaining,
    };
    let mut body = serde_json::to_string_pretty(&summary)?;
    body.push('\n');
    let tmp = run_dir.join(format!("{SUMMARY_FILE}.tmp"));
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, run_dir.join(SUMMARY_FILE))?;

    if let Some(program) = &result.best_program {
        let best = run_dir.join(BEST_DIR);
        std::fs::create_dir_all(&best)?;
        for (name, text) in &program.files {
            let rel = Path::new(name);
            if rel.is_absolute()
                || rel
                    .components()
                    .any(|c| matches!(c, std::path::Component::ParentDir))
            {
                return Err(TraceError::Invalid(format!(
                    "refusing to write program file with unsafe name {name:?}"
                )));
            }
            let target = best.join(rel);
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(target, text)?;
        }
    }
    Ok(())
}

/// What a resume request resolved to.
pub enum ResumePrep {
    /// The run already ended and no extension was requested.
    AlreadyFinished { status: ExitStatus },
    /// State restored and the log reopened for continuation.
    Continue {
        fold: FoldResult,
        writer: TraceWriter,
        /// A torn trailing line was discarded during restore.
        dropped_tail: bool,
    },
}

/// Prepares a run directory for continuation, optionally granting extra
/// budget. Holding the lock is required because this may rewrite the log
/// tail.
///
/// Extension semantics: only a budget-limited (`completed`) run can be
/// extended. Its final `RunEnded` record is popped from the log, the grant
/// is journaled in `overrides.json` keyed to the remaining tip sequence,
/// and the state is refolded; the continuation then appends exactly what an
/// uninterrupted run with the larger budget would have written after that
/// point. A crash between those steps leaves either a run that simply
/// re-finishes as `completed` or a fully applied extension, never a double
/// grant.
pub fn prepare_resume(lock: &RunLock, add_budget: u32) -> Result<ResumePrep, TraceError> {
    let run_dir = lock.run_dir();
    if run_mode_of(run_dir)? != RunMode::Engine {
        return Err(TraceError::Invalid(
            "only engine runs can be resumed; baseline runs are one-shot".to_owned(),
        ));
    }
    let restored = restore(run_dir)?;
    let clock = restored.fold.config.clock;

    let (valid_len, next_seq, grant_tip) = match (&restored.fold.pending, add_budget) {
        (Pending::Ended(status), 0) => {
            return Ok(ResumePrep::AlreadyFinished { status: *status });
        }
        (Pending::Ended(ExitStatus::Completed), _) => {
            // Pop the RunEnded line; the extended run will rewrite its own.
            let len = len_without_last_line(&run_dir.join(TRACE_FILE), restored.valid_len)?;
            (len, restored.fold.last_seq, restored.fold.last_seq - 1)
        }
        (Pending::Ended(status), _) => {
            return Err(TraceError::Invalid(format!(
                "run ended {status}; budget was not the limiting factor, so +budget does not apply"
            )));
        }
        // An unfinished (aborted or interrupted) run continues as-is; a
        // grant, if any, keys to the current tip.
        (_, _) => (restored.valid_len, restored.next_seq, restored.fold.last_seq),
    };

    let writer = TraceWriter::resume(run_dir, clock, valid_len, next_seq)?;
    if add_budget > 0 {
        record_extension(
            run_dir,
            BudgetExtension {
                at_seq: grant_tip,
                added: add_budget,
            },
        )?;
    }
    // Refold from the (possibly truncated) log so the continuation starts
    // from exactly what a crash-recovery would see.
    let RestoredRun {
        fold, dropped_tail, ..
    } = restore(run_dir)?;
    Ok(ResumePrep::Continue {
        fold,
        writer,
        dropped_tail,
    })
}

/// Reads the run mode from the first log line without folding the log.
fn run_mode_of(run_dir: &Path) -> Result<RunMode, TraceError> {
    use std::io::BufRead;
    let file = std::fs::File::open(run_dir.join(TRACE_FILE))?;
    let mut first = String::new();
    std::io::BufReader::new(file).read_line(&mut first)?;
    let record: TraceRecord =
        serde_json::from_str(first.trim_end()).map_err(|e| TraceError::Corrupt {
            line: 1,
            message: e.to_string(),
        })?;
    match record.event {
        TraceEvent::RunStarted { config, .. } => Ok(config.mode),
        _ => Err(TraceError::Invalid(
            "first event is not RunStarted".to_owned(),
        )),
    }
}

/// Byte length of the log up to (and excluding) its final line.
fn len_without_last_line(path: &Path, valid_len: u64) -> Result<u64, TraceError> {
    let bytes = std::fs::read(path)?;
    let head = bytes
        .get(..valid_len as usize)
        .ok_or_else(|| TraceError::Invalid(format!("{} shorter than its scan", path.display())))?;
    let body = head.strip_suffix(b"\n").unwrap_or(head);
    match body.iter().rposition(|b| *b == b'\n') {
        Some(pos) => Ok(pos as u64 + 1),
        None => Err(TraceError::Invalid(
            "log has no line before its terminal record".to_owned(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{self, EngineConfig};
    use crate::eval::build_evaluator;
    use crate::planner::scripted::RuleSet;
    use crate::testutil::{demo_landscape, demo_task};
    use crate::trace::{scan_log, ClockMode, TraceEvent};

    fn demo_planner() -> ScriptedPlanner {
        ScriptedPlanner::new(
            demo_landscape(),
            [
                ("tile_a".to_owned(), 0.9),
                ("layout_swizzle".to_owned(), 0.6),
                ("vectorize".to_owned(), 0.8),
            ]
            .into_iter()
            .collect(),
            RuleSet {
                sibling_decay: 0.3,
                child_bonus: 0.15,
                stall_penalty: 0.1,
                prune_margin: 30.0,
            },
        )
        .unwrap()
    }

    fn run_demo(run_dir: &Path, budget: u32) -> RunResult {
        let task = demo_task();
        let config = EngineConfig {
            budget_b: budget,
            stagnation_k: 3,
            ..EngineConfig::default()
        };
        let mut planner = demo_planner();
        let mut coder = ScriptedCoder::new();
        let mut evaluator = build_evaluator(&task).unwrap();
        let mut trace = TraceWriter::create(run_dir, ClockMode::Logical).unwrap();
        engine::run(
            &task,
            config,
            &mut planner,
            &mut coder,
            evaluator.as_mut(),
            &mut trace,
        )
        .unwrap()
    }

    #[test]
    fn lock_excludes_second_acquirer_and_reclaims_stale() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        let err = RunLock::acquire(dir.path()).unwrap_err();
        assert!(matches!(err, TraceError::Locked(_)), "{err}");
        drop(lock);
        // Released on drop.
        let lock = RunLock::acquire(dir.path()).unwrap();
        drop(lock);
        // A dead owner's lock is reclaimed.
        std::fs::write(dir.path().join(LOCK_FILE), "999999999\n").unwrap();
        let _lock = RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn unreadable_lock_owner_is_treated_as_stale() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(LOCK_FILE), "not a pid\n").unwrap();
        let _lock = RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn finalize_writes_summary_and_best_files() {
        let dir = tempfile::tempdir().unwrap();
        let result = run_demo(dir.path(), 40);
        finalize(dir.path(), "demo", &result).unwrap();

        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap())
                .unwrap();
        assert_eq!(summary["task_id"], "demo");
        assert_eq!(summary["exit_status"], "frontier-exhausted");
        assert_eq!(summary["exit_code"], 0);
        assert_eq!(summary["rounds_used"], 20);

        let best = std::fs::read_to_string(dir.path().join(BEST_DIR).join("directives.txt"))
            .unwrap();
        assert_eq!(best, "directives:\nlayout_swizzle\ntile_a\nvectorize\n");
    }

    #[test]
    fn unsafe_program_file_names_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut result = run_demo(dir.path(), 1);
        let program = result.best_program.as_mut().unwrap();
        let text = program.files.values().next().unwrap().clone();
        program.files.insert("../escape.txt".to_owned(), text);
        let err = finalize(dir.path(), "demo", &result).unwrap_err();
        assert!(err.to_string().contains("unsafe name"), "{err}");
    }

    #[test]
    fn resume_of_finished_run_without_grant_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        run_demo(dir.path(), 6);
        let before = std::fs::read(dir.path().join(TRACE_FILE)).unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        match prepare_resume(&lock, 0).unwrap() {
            ResumePrep::AlreadyFinished { status } => {
                assert_eq!(status, ExitStatus::Completed);
            }
            ResumePrep::Continue { .. } => panic!("finished run must not continue"),
        }
        assert_eq!(std::fs::read(dir.path().join(TRACE_FILE)).unwrap(), before);
    }

    #[test]
    fn budget_extension_continues_a_completed_run() {
        let done = tempfile::tempdir().unwrap();
        run_demo(done.path(), 6);
        {
            let scan = scan_log(&done.path().join(TRACE_FILE)).unwrap();
            let last = &scan.records.last().unwrap().event;
            assert!(matches!(
                last,
                TraceEvent::RunEnded {
                    exit_status: ExitStatus::Completed,
                    ..
                }
            ));
        }

        let lock = RunLock::acquire(done.path()).unwrap();
        let prep = prepare_resume(&lock, 14).unwrap();
        let ResumePrep::Continue {
            fold, mut writer, ..
        } = prep
        else {
            panic!("extension must continue");
        };
        assert_eq!(fold.state.budget_remaining, 14);
        let task = fold.task.clone();
        let mut planner = demo_planner();
        let mut coder = ScriptedCoder::new();
        let mut evaluator = build_evaluator(&task).unwrap();
        let result = engine::resume(
            fold,
            &task,
            &mut planner,
            &mut coder,
            evaluator.as_mut(),
            &mut writer,
        )
        .unwrap();
        drop(lock);

        // The six pre-extension rounds closed the second hypothesis early
        // (budget ran out after two of its samples); that closure is
        // history, so the continuation evolves from it rather than
        // rewriting it, reaches the optimum, and exhausts the frontier
        // after 18 total rounds.
        assert_eq!(result.rounds_used, 18);
        assert_eq!(result.exit_status, ExitStatus::FrontierExhausted);
        assert_eq!(result.best_score.unwrap(), 2500.0 / 21.0);
        assert_eq!(result.budget_remaining, 2);

        // The extended ledger stays consistent: a fresh restore folds the
        // whole trace with the grant applied up front.
        assert_eq!(crate::trace::load_overrides(done.path()).unwrap().total_added(), 14);
        let restored = restore(done.path()).unwrap();
        assert!(matches!(
            restored.fold.pending,
            Pending::Ended(ExitStatus::FrontierExhausted)
        ));
        assert_eq!(restored.fold.evaluations, 18);
        assert_eq!(restored.fold.state.budget_remaining, 2);
    }

    #[test]
    fn extension_of_exhausted_frontier_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        run_demo(dir.path(), 40); // ends frontier-exhausted at 20 rounds
        let lock = RunLock::acquire(dir.path()).unwrap();
        let err = match prepare_resume(&lock, 10) {
            Err(e) => e,
            Ok(_) => panic!("frontier-exhausted run must refuse +budget"),
        };
        assert!(err.to_string().contains("frontier-exhausted"), "{err}");
    }

    #[test]
    fn baseline_directories_refuse_resume() {
        use crate::baseline::{run_baseline, BaselineConfig, ScriptedMutator};
        let dir = tempfile::tempdir().unwrap();
        let task = demo_task();
        let mut mutator = ScriptedMutator::new(vec!["tile_a".to_owned()]);
        let mut evaluator = build_evaluator(&task).unwrap();
        let mut trace = TraceWriter::create(dir.path(), ClockMode::Logical).unwrap();
        let config = BaselineConfig {
            budget: 3,
            ..BaselineConfig::default()
        };
        run_baseline(&task, config, &mut mutator, evaluator.as_mut(), &mut trace).unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        let err = match prepare_resume(&lock, 0) {
            Err(e) => e,
            Ok(_) => panic!("baseline resume must be refused"),
        };
        assert!(err.to_string().contains("one-shot"), "{err}");
    }

    #[test]
    fn backend_spec_parsing_rejects_unknown_kinds() {
        fn err_of<T>(r: Result<T, TraceError>) -> String {
            match r {
                Ok(_) => panic!("expected an error"),
                Err(e) => e.to_string(),
            }
        }
        assert!(build_coder("scripted").is_ok());
        assert!(err_of(build_planner("scripted")).contains("planner spec"));
        assert!(err_of(build_planner("mystery:file.toml")).contains("planner spec"));
        assert!(err_of(build_coder("llm:")).contains("empty path"));
        assert!(err_of(build_mutator("scripted:/nonexistent/x.toml")).contains("backend config"));
    }
}
