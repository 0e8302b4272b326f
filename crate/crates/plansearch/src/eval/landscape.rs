//! Synthetic optimization landscape: a closed-form latency model over sets
//! of named directives.
//!
//! A candidate program is a directive list. Its latency on a workload is
//! the workload's base latency times the factor of every active directive
//! times the factor of every interaction whose directive set is fully
//! active. Directives may require prerequisites; violating one is a compile
//! failure. The model is deterministic and cheap to enumerate exhaustively,
//! which makes it a reference oracle for the whole pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EvalContext, EvalError, Evaluator};
use crate::task::Task;
use crate::tree::{Observation, Program, WorkloadResult, WorkloadStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectiveSpec {
    pub name: String,
    /// Multiplier applied to latency when the directive is active. Below
    /// 1.0 helps, above 1.0 hurts (until an interaction pays it back).
    pub factor: f64,
    /// Directives that must also be active.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSpec {
    /// At least two directive names; the factor applies only when all are
    /// active together.
    pub directives: Vec<String>,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    /// Workload id -> latency of the empty directive set, in microseconds.
    pub base_us: BTreeMap<String, f64>,
    /// The directive vocabulary, in canonical order.
    pub directives: Vec<DirectiveSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interactions: Vec<InteractionSpec>,
}

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid landscape: {0}")]
    Invalid(String),
}

/// Why a directive set fails to compile.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CompileFailure {
    #[error("unknown directive {0:?}")]
    UnknownDirective(String),
    #[error("directive {directive:?} requires {missing:?}")]
    MissingPrerequisite { directive: String, missing: String },
}

impl Landscape {
    pub fn load(path: &Path) -> Result<Landscape, LandscapeError> {
        let text = std::fs::read_to_string(path).map_err(|source| LandscapeError::Io {
            path: path.to_owned(),
            source,
        })?;
        let landscape: Landscape =
            toml::from_str(&text).map_err(|source| LandscapeError::Parse {
                path: path.to_owned(),
                source: Box::new(source),
            })?;
        landscape.validate()?;
        Ok(landscape)
    }

    pub fn validate(&self) -> Result<(), LandscapeError> {
        if self.base_us.is_empty() {
            return Err(LandscapeError::Invalid("no workloads".to_owned()));
        }
        for (id, base) in &self.base_us {
            if !(base.is_finite() && *base > 0.0) {
                return Err(LandscapeError::Invalid(format!(
                    "workload {id:?} base latency must be positive"
                )));
            }
        }
        if self.directives.is_empty() {
            return Err(LandscapeError::Invalid("empty directive vocabulary".to_owned()));
        }
        let names: BTreeSet<&str> = self.directives.iter().map(|d| d.name.as_str()).collect();
        if names.len() != self.directives.len() {
            return Err(LandscapeError::Invalid("duplicate directive name".to_owned()));
        }
        for d in &self.directives {
            if !(d.factor.is_finite() && d.factor > 0.0) {
                return Err(LandscapeError::Invalid(format!(
                    "directive {:?} factor must be positive",
                    d.name
                )));
            }
            for r in &d.requires {
                if !names.contains(r.as_str()) {
                    return Err(LandscapeError::Invalid(format!(
                        "directive {:?} requires unknown {r:?}",
                        d.name
                    )));
                }
            }
        }
        for i in &self.interactions {
            if i.directives.len() < 2 {
                return Err(LandscapeError::Invalid(
                    "interaction needs at least two directives".to_owned(),
                ));
            }
            if !(i.factor.is_finite() && i.factor > 0.0) {
                return Err(LandscapeError::Invalid("interaction factor must be positive".to_owned()));
            }
            for name in &i.directives {
                if !names.contains(name.as_str()) {
                    return Err(LandscapeError::Invalid(format!(
                        "interaction references unknown directive {name:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn directive_names(&self) -> Vec<&str> {
        self.directives.iter().map(|d| d.name.as_str()).collect()
    }

    /// Checks the set against the vocabulary and prerequisite graph.
    pub fn check_directives(&self, active: &BTreeSet<String>) -> Result<(), CompileFailure> {
        let by_name: BTreeMap<&str, &DirectiveSpec> = self
            .directives
            .iter()
            .map(|d| (d.name.as_str(), d))
            .collect();
        for name in active {
            let spec = by_name
                .get(name.as_str())
                .ok_or_else(|| CompileFailure::UnknownDirective(name.clone()))?;
            for r in &spec.requires {
                if !active.contains(r) {
                    return Err(CompileFailure::MissingPrerequisite {
                        directive: name.clone(),
                        missing: r.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Latency of a valid directive set on one workload, in microseconds.
    pub fn latency_us(
        &self,
        active: &BTreeSet<String>,
        workload_id: &str,
    ) -> Result<f64, LandscapeError> {
        self.check_directives(active)
            .map_err(|e| LandscapeError::Invalid(e.to_string()))?;
        let base = self.base_us.get(workload_id).ok_or_else(|| {
            LandscapeError::Invalid(format!("unknown workload {workload_id:?}"))
        })?;
        let mut latency = *base;
        for d in &self.directives {
            if active.contains(&d.name) {
                latency *= d.factor;
            }
        }
        for i in &self.interactions {
            if i.directives.iter().all(|n| active.contains(n)) {
                latency *= i.factor;
            }
        }
        Ok(latency)
    }

    /// Enumerates every prerequisite-valid directive subset with its mean
    /// score given per-workload reference latencies. The exhaustive table
    /// is the ground truth the search is judged against.
    pub fn enumerate_scores(
        &self,
        p_refs: &BTreeMap<String, f64>,
    ) -> Vec<(BTreeSet<String>, f64)> {
        let n = self.directives.len();
        assert!(n <= 20, "enumeration is only for small vocabularies");
        let mut table = Vec::new();
        for mask in 0u32..(1 << n) {
            let active: BTreeSet<String> = self
                .directives
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, d)| d.name.clone())
                .collect();
            if self.check_directives(&active).is_err() {
                continue;
            }
            let mut total = 0.0;
            for (workload_id, p_ref) in p_refs {
                let latency = self
                    .latency_us(&active, workload_id)
                    .expect("validated set and known workload");
                total += 100.0 * p_ref / latency;
            }
            table.push((active, total / p_refs.len() as f64));
        }
        table
    }

    /// The best valid directive set and its mean score.
    pub fn optimum(&self, p_refs: &BTreeMap<String, f64>) -> (BTreeSet<String>, f64) {
        self.enumerate_scores(p_refs)
            .into_iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("scores are finite"))
            .expect("the empty set is always valid")
    }
}

/// Parses a directive-list program file: an optional `directives:` header
/// followed by whitespace-separated directive names.
pub fn parse_directives(text: &str) -> BTreeSet<String> {
    let body = text.trim_start();
    let body = body.strip_prefix("directives:").unwrap_or(body);
    body.split_whitespace().map(str::to_owned).collect()
}

/// Renders a directive set in the format [`parse_directives`] accepts.
pub fn render_directives(active: &BTreeSet<String>) -> String {
    let mut out = String::from("directives:");
    for d in active {
        out.push('\n');
        out.push_str(d);
    }
    out.push('\n');
    out
}

pub struct LandscapeEvaluator {
    landscape: Landscape,
}

impl LandscapeEvaluator {
    pub fn new(landscape: Landscape) -> Self {
        LandscapeEvaluator { landscape }
    }

    fn all_failed(&self, task: &Task, status: WorkloadStatus, excerpt: &str) -> Observation {
        let results = task
            .workloads
            .iter()
            .map(|w| WorkloadResult::failed(w.workload_id.clone(), status, excerpt.to_owned()))
            .collect();
        Observation::new(results, format!("compile failed: {excerpt}"))
    }
}

impl Evaluator for LandscapeEvaluator {
    fn evaluate(
        &mut self,
        task: &Task,
        program: &Program,
        _ctx: &EvalContext,
    ) -> Result<Observation, EvalError> {
        let file_name = task
            .file_manifest
            .first()
            .map(|f| f.name.as_str())
            .ok_or_else(|| EvalError::Infrastructure("task has no file manifest".to_owned()))?;
        let Some(text) = program.files.get(file_name) else {
            return Ok(self.all_failed(
                task,
                WorkloadStatus::CompileError,
                &format!("missing file {file_name:?}"),
            ));
        };
        let active = parse_directives(text);
        if let Err(failure) = self.landscape.check_directives(&active) {
            return Ok(self.all_failed(task, WorkloadStatus::CompileError, &failure.to_string()));
        }
        let mut results = Vec::with_capacity(task.workloads.len());
        for w in &task.workloads {
            let latency = self
                .landscape
                .latency_us(&active, &w.workload_id)
                .map_err(|e| EvalError::Infrastructure(e.to_string()))?;
            results.push(WorkloadResult::passed(
                w.workload_id.clone(),
                latency,
                String::new(),
            ));
        }
        let names: Vec<&str> = active.iter().map(String::as_str).collect();
        Ok(Observation::new(
            results,
            format!("directives=[{}]", names.join(", ")),
        ))
    }

    fn describe(&self) -> String {
        "synthetic-landscape".to_owned()
    }
}
