//! Evaluation backends.
//!
//! An evaluator turns a candidate program into an [`Observation`]. Candidate
//! failures (compile errors, wrong answers, timeouts) are observations the
//! search can learn from; only harness breakage surfaces as [`EvalError`].

pub mod landscape;
pub mod subprocess;

use std::path::Path;

use thiserror::Error;

use crate::task::{EvaluatorConfig, Task, TaskError};
use crate::tree::{Observation, Program};

#[derive(Debug, Error)]
pub enum EvalError {
    /// The harness itself failed; the run must stop, resumable from trace.
    #[error("evaluator infrastructure failure: {0}")]
    Infrastructure(String),
}

/// Per-invocation context supplied by the engine.
pub struct EvalContext<'a> {
    /// Round number the evaluation will be charged to.
    pub round: u32,
    /// Directory under which external harnesses get scratch workspaces.
    pub work_root: Option<&'a Path>,
}

pub trait Evaluator {
    fn evaluate(
        &mut self,
        task: &Task,
        program: &Program,
        ctx: &EvalContext,
    ) -> Result<Observation, EvalError>;

    /// Short spec string recorded in traces.
    fn describe(&self) -> String;
}

/// Instantiates the evaluator a task declares.
pub fn build_evaluator(task: &Task) -> Result<Box<dyn Evaluator>, TaskError> {
    match &task.evaluator {
        EvaluatorConfig::SyntheticLandscape { landscape, .. } => {
            let inline = landscape
                .inline()
                .ok_or_else(|| TaskError::Invalid("landscape reference not resolved".to_owned()))?;
            Ok(Box::new(landscape::LandscapeEvaluator::new(inline.clone())))
        }
        EvaluatorConfig::Subprocess {
            argv,
            env_passthrough,
            compile_timeout_s,
            run_timeout_s,
            metadata_limit_bytes,
        } => Ok(Box::new(subprocess::SubprocessEvaluator::new(
            argv.clone(),
            env_passthrough.clone(),
            *compile_timeout_s,
            *run_timeout_s,
            *metadata_limit_bytes,
        ))),
    }
}
