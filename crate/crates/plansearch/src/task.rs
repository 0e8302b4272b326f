//! Task definition: objective, workload suite, file manifest, and the
//! evaluator wiring. Tasks are loaded from TOML files and fully resolved at
//! load time (referenced files inlined, relative paths absolutized) so a
//! serialized task is self-contained.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::landscape::Landscape;

/// One entry of the required output-file manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSpec {
    pub name: String,
    pub description: String,
}

/// One benchmark workload with its reference latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub workload_id: String,
    /// Free-form shape parameters, shown to the coder verbatim.
    #[serde(default)]
    pub parameters: BTreeMap<String, serde_json::Value>,
    /// Reference-implementation latency in microseconds. Positive.
    pub p_ref_us: f64,
}

/// How candidate programs are scored against the workloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvaluatorConfig {
    /// Closed-form multiplicative latency model; fully deterministic.
    SyntheticLandscape {
        landscape: LandscapeSource,
        /// Parsed and carried for forward compatibility; the current model
        /// is noise-free and ignores it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        determinism_seed: Option<u64>,
    },
    /// External benchmark harness speaking the JSON result protocol.
    Subprocess {
        argv: Vec<String>,
        #[serde(default)]
        env_passthrough: Vec<String>,
        compile_timeout_s: f64,
        run_timeout_s: f64,
        /// Cap on captured stdout/stderr in observation metadata.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        metadata_limit_bytes: Option<usize>,
    },
}

/// A landscape either referenced by path (as written in task files) or
/// inlined (after resolution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LandscapeSource {
    Inline(Landscape),
    Path(PathBuf),
}

impl LandscapeSource {
    pub fn inline(&self) -> Option<&Landscape> {
        match self {
            LandscapeSource::Inline(l) => Some(l),
            LandscapeSource::Path(_) => None,
        }
    }
}

/// A fully described optimization task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    /// What to optimize, in prose. Becomes the root node's intent.
    pub objective_text: String,
    /// Reference implementation or specification shown to the coder.
    pub reference_impl: String,
    /// Hard constraints and guidance for generation.
    #[serde(default)]
    pub instructions: String,
    pub file_manifest: Vec<FileSpec>,
    pub workloads: Vec<Workload>,
    pub evaluator: EvaluatorConfig,
    /// Optional seed implementation attached to the tree root, unevaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_program: Option<BTreeMap<String, String>>,
    /// Absolute path of the file this task was loaded from, when any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum TaskError {
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
    #[error("invalid task: {0}")]
    Invalid(String),
}

impl Task {
    /// Loads a task file, inlines its landscape reference if any, and
    /// validates the result.
    pub fn load(path: &Path) -> Result<Task, TaskError> {
        let path = path
            .canonicalize()
            .map_err(|source| TaskError::Io {
                path: path.to_owned(),
                source,
            })?;
        let text = std::fs::read_to_string(&path).map_err(|source| TaskError::Io {
            path: path.clone(),
            source,
        })?;
        let mut task: Task = toml::from_str(&text).map_err(|source| TaskError::Parse {
            path: path.clone(),
            source: Box::new(source),
        })?;
        let dir = path.parent().expect("canonical file path has a parent");
        task.resolve_landscape(dir)?;
        task.source_path = Some(path);
        task.validate()?;
        Ok(task)
    }

    fn resolve_landscape(&mut self, dir: &Path) -> Result<(), TaskError> {
        if let EvaluatorConfig::SyntheticLandscape { landscape, .. } = &mut self.evaluator {
            if let LandscapeSource::Path(p) = landscape {
                let full = if p.is_absolute() { p.clone() } else { dir.join(&p) };
                let inline = Landscape::load(&full).map_err(|e| {
                    TaskError::Invalid(format!("landscape {}: {e}", full.display()))
                })?;
                *landscape = LandscapeSource::Inline(inline);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.workloads.is_empty() {
            return Err(TaskError::Invalid("no workloads declared".to_owned()));
        }
        let mut seen = BTreeSet::new();
        for w in &self.workloads {
            if !seen.insert(w.workload_id.as_str()) {
                return Err(TaskError::Invalid(format!(
                    "duplicate workload id {:?}",
                    w.workload_id
                )));
            }
            if !(w.p_ref_us.is_finite() && w.p_ref_us > 0.0) {
                return Err(TaskError::Invalid(format!(
                    "workload {:?} has non-positive reference latency",
                    w.workload_id
                )));
            }
        }
        if self.file_manifest.is_empty() {
            return Err(TaskError::Invalid("empty file manifest".to_owned()));
        }
        let mut names = BTreeSet::new();
        for f in &self.file_manifest {
            if !names.insert(f.name.as_str()) {
                return Err(TaskError::Invalid(format!(
                    "duplicate manifest file {:?}",
                    f.name
                )));
            }
        }
        if let Some(files) = &self.initial_program {
            for name in files.keys() {
                if !names.contains(name.as_str()) {
                    return Err(TaskError::Invalid(format!(
                        "initial program file {name:?} not in manifest"
                    )));
                }
            }
        }
        match &self.evaluator {
            EvaluatorConfig::SyntheticLandscape { landscape, .. } => {
                let inline = landscape.inline().ok_or_else(|| {
                    TaskError::Invalid("landscape reference not resolved".to_owned())
                })?;
                for w in &self.workloads {
                    if !inline.base_us.contains_key(&w.workload_id) {
                        return Err(TaskError::Invalid(format!(
                            "landscape has no base latency for workload {:?}",
                            w.workload_id
                        )));
                    }
                }
            }
            EvaluatorConfig::Subprocess {
                argv,
                compile_timeout_s,
                run_timeout_s,
                ..
            } => {
                if argv.is_empty() {
                    return Err(TaskError::Invalid("empty evaluator argv".to_owned()));
                }
                if !(compile_timeout_s.is_finite() && *compile_timeout_s > 0.0)
                    || !(run_timeout_s.is_finite() && *run_timeout_s > 0.0)
                {
                    return Err(TaskError::Invalid(
                        "evaluator timeouts must be positive".to_owned(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn workload(&self, id: &str) -> Option<&Workload> {
        self.workloads.iter().find(|w| w.workload_id == id)
    }

    /// Manifest file names in declaration order.
    pub fn manifest_names(&self) -> Vec<&str> {
        self.file_manifest.iter().map(|f| f.name.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn demo_task_toml() -> &'static str {
        r#"
task_id = "demo"
objective_text = "Minimize kernel latency across the workload suite."
reference_impl = "for (i = 0; i < n; i++) out[i] = a[i] * b[i];"
instructions = "Output a directive list."

[[file_manifest]]
name = "directives.txt"
description = "One optimization directive per line."

[[workloads]]
workload_id = "w_small"
parameters = { n = 1024 }
p_ref_us = 500.0

[[workloads]]
workload_id = "w_large"
parameters = { n = 1048576 }
p_ref_us = 1000.0

[evaluator]
kind = "synthetic-landscape"
landscape = "landscape.toml"
"#
    }

    fn demo_landscape_toml() -> &'static str {
        r#"
[base_us]
w_small = 1000.0
w_large = 2000.0

[[directives]]
name = "tile_a"
factor = 0.8

[[directives]]
name = "layout_swizzle"
factor = 1.05

[[directives]]
name = "vectorize"
factor = 1.0
requires = ["layout_swizzle"]

[[interactions]]
directives = ["layout_swizzle", "vectorize"]
factor = 0.5
"#
    }

    fn write_demo(dir: &Path) -> PathBuf {
        let task_path = dir.join("task.toml");
        std::fs::File::create(&task_path)
            .unwrap()
            .write_all(demo_task_toml().as_bytes())
            .unwrap();
        std::fs::File::create(dir.join("landscape.toml"))
            .unwrap()
            .write_all(demo_landscape_toml().as_bytes())
            .unwrap();
        task_path
    }

    #[test]
    fn load_resolves_landscape_inline() {
        let dir = tempfile::tempdir().unwrap();
        let task = Task::load(&write_demo(dir.path())).unwrap();
        assert_eq!(task.task_id, "demo");
        assert_eq!(task.workloads.len(), 2);
        let EvaluatorConfig::SyntheticLandscape { landscape, .. } = &task.evaluator else {
            panic!("expected landscape evaluator");
        };
        let inline = landscape.inline().expect("resolved inline");
        assert_eq!(inline.directives.len(), 3);
        assert_eq!(inline.base_us["w_small"], 1000.0);
        assert!(task.source_path.is_some());
    }

    #[test]
    fn resolved_task_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let task = Task::load(&write_demo(dir.path())).unwrap();
        let json = serde_json::to_string(&task).unwrap();
        let back: Task = serde_json::from_str(&json).unwrap();
        assert_eq!(back, task);
        back.validate().unwrap();
    }

    #[test]
    fn duplicate_workload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = demo_task_toml().replace("w_large", "w_small");
        std::fs::write(dir.path().join("task.toml"), text).unwrap();
        std::fs::write(dir.path().join("landscape.toml"), demo_landscape_toml()).unwrap();
        let err = Task::load(&dir.path().join("task.toml")).unwrap_err();
        assert!(matches!(err, TaskError::Invalid(_)), "{err}");
    }

    #[test]
    fn missing_base_latency_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = demo_landscape_toml().replace("w_large", "w_other");
        std::fs::write(dir.path().join("task.toml"), demo_task_toml()).unwrap();
        std::fs::write(dir.path().join("landscape.toml"), text).unwrap();
        let err = Task::load(&dir.path().join("task.toml")).unwrap_err();
        assert!(err.to_string().contains("w_large"), "{err}");
    }
}
