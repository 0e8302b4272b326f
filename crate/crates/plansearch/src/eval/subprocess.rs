//! External benchmark harness driven over a one-shot subprocess protocol.
//!
//! Per evaluation the candidate's files are written into a fresh scratch
//! workspace and the configured argv is invoked with `{workspace}` and
//! `{task_file}` placeholders expanded (the workspace path is appended if
//! no placeholder mentions it). The harness prints a single JSON result
//! line to stdout:
//!
//! ```json
//! {"workloads": [{"workload_id": "w0", "status": "pass",
//!                 "latency_us": 812.5, "log_excerpt": ""}],
//!  "global_log": ""}
//! ```
//!
//! Candidate failures are reported through `status`; the harness may exit
//! nonzero as long as it prints the report. A missing or malformed report
//! is an infrastructure failure, as is an unknown workload id. Exceeding
//! the combined compile and run timeout kills the process and yields a
//! timeout observation charged to the candidate.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::Deserialize;

use super::{EvalContext, EvalError, Evaluator};
use crate::task::Task;
use crate::text::truncate_tail;
use crate::tree::{Observation, Program, WorkloadResult, WorkloadStatus};

pub const DEFAULT_METADATA_LIMIT: usize = 16 * 1024;

const POLL_INTERVAL: Duration = Duration::from_millis(10);

pub struct SubprocessEvaluator {
    argv: Vec<String>,
    env_passthrough: Vec<String>,
    timeout: Duration,
    metadata_limit: usize,
}

#[derive(Debug, Deserialize)]
struct ChildReport {
    workloads: Vec<ChildWorkload>,
    #[serde(default)]
    global_log: String,
}

#[derive(Debug, Deserialize)]
struct ChildWorkload {
    workload_id: String,
    status: WorkloadStatus,
    #[serde(default)]
    latency_us: Option<f64>,
    #[serde(default)]
    log_excerpt: String,
}

impl SubprocessEvaluator {
    pub fn new(
        argv: Vec<String>,
        env_passthrough: Vec<String>,
        compile_timeout_s: f64,
        run_timeout_s: f64,
        metadata_limit_bytes: Option<usize>,
    ) -> Self {
        SubprocessEvaluator {
            argv,
            env_passthrough,
            timeout: Duration::from_secs_f64(compile_timeout_s + run_timeout_s),
            metadata_limit: metadata_limit_bytes.unwrap_or(DEFAULT_METADATA_LIMIT),
        }
    }

    fn expanded_argv(&self, workspace: &Path, task: &Task) -> Result<Vec<String>, EvalError> {
        let workspace_str = workspace.to_string_lossy();
        let mut saw_workspace = false;
        let mut argv = Vec::with_capacity(self.argv.len() + 1);
        for arg in &self.argv {
            let mut expanded = arg.clone();
            if expanded.contains("{workspace}") {
                saw_workspace = true;
                expanded = expanded.replace("{workspace}", &workspace_str);
            }
            if expanded.contains("{task_file}") {
                let task_file = task.source_path.as_ref().ok_or_else(|| {
                    EvalError::Infrastructure(
                        "argv references {task_file} but the task has no source path".to_owned(),
                    )
                })?;
                expanded = expanded.replace("{task_file}", &task_file.to_string_lossy());
            }
            argv.push(expanded);
        }
        if !saw_workspace {
            argv.push(workspace_str.into_owned());
        }
        Ok(argv)
    }

    fn all_timeout(&self, task: &Task, metadata: String) -> Observation {
        let results = task
            .workloads
            .iter()
            .map(|w| {
                WorkloadResult::failed(
                    w.workload_id.clone(),
                    WorkloadStatus::Timeout,
                    "evaluation timed out".to_owned(),
                )
            })
            .collect();
        Observation::new(results, metadata)
    }
}

impl Evaluator for SubprocessEvaluator {
    fn evaluate(
        &mut self,
        task: &Task,
        program: &Program,
        ctx: &EvalContext,
    ) -> Result<Observation, EvalError> {
        let work_root = ctx.work_root.ok_or_else(|| {
            EvalError::Infrastructure("subprocess evaluator requires a work root".to_owned())
        })?;
        let workspace = work_root.join(format!("r{:06}", ctx.round));
        if workspace.exists() {
            std::fs::remove_dir_all(&workspace)
                .map_err(|e| EvalError::Infrastructure(format!("cannot clear workspace: {e}")))?;
        }
        std::fs::create_dir_all(&workspace)
            .map_err(|e| EvalError::Infrastructure(format!("cannot create workspace: {e}")))?;
        for (name, contents) in &program.files {
            std::fs::write(workspace.join(name), contents)
                .map_err(|e| EvalError::Infrastructure(format!("cannot write {name}: {e}")))?;
        }

        let argv = self.expanded_argv(&workspace, task)?;
        let mut command = Command::new(&argv[0]);
        command
            .args(&argv[1..])
            .current_dir(&workspace)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .env_clear();
        if let Some(path) = std::env::var_os("PATH") {
            command.env("PATH", path);
        }
        for name in &self.env_passthrough {
            if let Some(value) = std::env::var_os(name) {
                command.env(name, value);
            }
        }

        let mut child = command
            .spawn()
            .map_err(|e| EvalError::Infrastructure(format!("cannot spawn {:?}: {e}", argv[0])))?;
        let stdout_reader = drain_thread(child.stdout.take().expect("stdout piped"));
        let stderr_reader = drain_thread(child.stderr.take().expect("stderr piped"));

        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) => {
                    if started.elapsed() > self.timeout {
                        let _ = child.kill();
                        let _ = child.wait();
                        break None;
                    }
                    std::thread::sleep(POLL_INTERVAL);
                }
                Err(e) => {
                    let _ = child.kill();
                    return Err(EvalError::Infrastructure(format!("wait failed: {e}")));
                }
            }
        };
        let stdout = stdout_reader.join().expect("reader thread never panics");
        let stderr = stderr_reader.join().expect("reader thread never panics");

        let Some(status) = status else {
            let metadata = self.compose_metadata(
                &format!("killed after {:.1}s timeout", self.timeout.as_secs_f64()),
                &stdout,
                &stderr,
            );
            return Ok(self.all_timeout(task, metadata));
        };

        let report = parse_report(&stdout);
        let metadata = self.compose_metadata(&format!("exit: {status}"), &stdout, &stderr);
        let Some(report) = report else {
            return Err(EvalError::Infrastructure(format!(
                "harness produced no result report ({metadata})"
            )));
        };

        let mut by_id: BTreeMap<&str, &ChildWorkload> = BTreeMap::new();
        for w in &report.workloads {
            if task.workload(&w.workload_id).is_none() {
                return Err(EvalError::Infrastructure(format!(
                    "harness reported unknown workload {:?}",
                    w.workload_id
                )));
            }
            by_id.insert(w.workload_id.as_str(), w);
        }
        let mut results = Vec::with_capacity(task.workloads.len());
        for w in &task.workloads {
            match by_id.get(w.workload_id.as_str()) {
                Some(child) => {
                    if child.status == WorkloadStatus::Pass {
                        let latency = child
                            .latency_us
                            .filter(|l| l.is_finite() && *l > 0.0)
                            .ok_or_else(|| {
                                EvalError::Infrastructure(format!(
                                    "workload {:?} passed without a valid latency",
                                    w.workload_id
                                ))
                            })?;
                        results.push(WorkloadResult::passed(
                            w.workload_id.clone(),
                            latency,
                            child.log_excerpt.clone(),
                        ));
                    } else {
                        results.push(WorkloadResult::failed(
                            w.workload_id.clone(),
                            child.status,
                            child.log_excerpt.clone(),
                        ));
                    }
                }
                None => results.push(WorkloadResult::failed(
                    w.workload_id.clone(),
                    WorkloadStatus::RuntimeError,
                    "no result reported".to_owned(),
                )),
            }
        }
        let metadata = if report.global_log.is_empty() {
            metadata
        } else {
            truncate_tail(&format!("{}\n{metadata}", report.global_log), self.metadata_limit)
        };
        Ok(Observation::new(results, metadata))
    }

    fn describe(&self) -> String {
        format!("subprocess:{}", self.argv.join(" "))
    }
}

impl SubprocessEvaluator {
    fn compose_metadata(&self, headline: &str, stdout: &[u8], stderr: &[u8]) -> String {
        let text = format!(
            "{headline}\n--- stdout ---\n{}\n--- stderr ---\n{}",
            String::from_utf8_lossy(stdout),
            String::from_utf8_lossy(stderr),
        );
        truncate_tail(&text, self.metadata_limit)
    }
}

fn drain_thread(mut reader: impl Read + Send + 'static) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = reader.read_to_end(&mut buf);
        buf
    })
}

/// Finds the report: the last stdout line that parses as one.
fn parse_report(stdout: &[u8]) -> Option<ChildReport> {
    let text = String::from_utf8_lossy(stdout);
    text.lines()
        .rev()
        .find_map(|line| serde_json::from_str::<ChildReport>(line.trim()).ok())
}
