//! Scoring: correctness-gated normalized speedup.
//!
//! A candidate earns, per workload, 100 times the speedup over the
//! reference latency, but only if it is correct on every workload; any
//! failure zeroes the whole breakdown. The aggregate is the arithmetic
//! mean over workloads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::Task;
use crate::tree::{Observation, WorkloadStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadScore {
    pub workload_id: String,
    /// `p_ref / p` when the workload passed and the program is correct
    /// overall, else 0.
    pub speedup: f64,
    /// `100 * speedup`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub per_workload: Vec<WorkloadScore>,
    pub aggregate: f64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("nothing to score")]
    EmptyInput,
    #[error("observation does not match task workloads: {0}")]
    WorkloadMismatch(String),
}

/// Scores one observation against the task's reference latencies.
///
/// The observation must carry exactly one result per declared workload, in
/// task order.
pub fn score(task: &Task, obs: &Observation) -> Result<ScoreBreakdown, ScoreError> {
    if task.workloads.is_empty() {
        return Err(ScoreError::EmptyInput);
    }
    if obs.workload_results.len() != task.workloads.len() {
        return Err(ScoreError::WorkloadMismatch(format!(
            "expected {} results, got {}",
            task.workloads.len(),
            obs.workload_results.len()
        )));
    }
    let mut per_workload = Vec::with_capacity(task.workloads.len());
    for (workload, result) in task.workloads.iter().zip(&obs.workload_results) {
        if workload.workload_id != result.workload_id {
            return Err(ScoreError::WorkloadMismatch(format!(
                "expected {:?}, got {:?}",
                workload.workload_id, result.workload_id
            )));
        }
        let speedup = if obs.correct && result.status == WorkloadStatus::Pass {
            let latency = result
                .latency_us
                .filter(|l| l.is_finite() && *l > 0.0)
                .ok_or_else(|| {
                    ScoreError::WorkloadMismatch(format!(
                        "workload {:?} passed without a valid latency",
                        workload.workload_id
                    ))
                })?;
            workload.p_ref_us / latency
        } else {
            0.0
        };
        per_workload.push(WorkloadScore {
            workload_id: workload.workload_id.clone(),
            speedup,
            score: 100.0 * speedup,
        });
    }
    let aggregate = per_workload.iter().map(|w| w.score).sum::<f64>() / per_workload.len() as f64;
    Ok(ScoreBreakdown {
        per_workload,
        aggregate,
    })
}

/// Fraction of workloads whose speedup meets the threshold.
pub fn fast_p(speedups: &[f64], threshold: f64) -> Result<f64, ScoreError> {
    if speedups.is_empty() {
        return Err(ScoreError::EmptyInput);
    }
    let hits = speedups.iter().filter(|s| **s >= threshold).count();
    Ok(hits as f64 / speedups.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{EvaluatorConfig, FileSpec, Workload};
    use crate::tree::WorkloadResult;
    use std::collections::BTreeMap;

    fn task_with(p_refs: &[(&str, f64)]) -> Task {
        Task {
            task_id: "t".to_owned(),
            objective_text: String::new(),
            reference_impl: String::new(),
            instructions: String::new(),
            file_manifest: vec![FileSpec {
                name: "main.txt".to_owned(),
                description: String::new(),
            }],
            workloads: p_refs
                .iter()
                .map(|(id, p_ref)| Workload {
                    workload_id: (*id).to_owned(),
                    parameters: BTreeMap::new(),
                    p_ref_us: *p_ref,
                })
                .collect(),
            evaluator: EvaluatorConfig::Subprocess {
                argv: vec!["true".to_owned()],
                env_passthrough: Vec::new(),
                compile_timeout_s: 1.0,
                run_timeout_s: 1.0,
                metadata_limit_bytes: None,
            },
            initial_program: None,
            source_path: None,
        }
    }

    #[test]
    fn correct_program_scores_normalized_speedup() {
        let task = task_with(&[("w0", 500.0), ("w1", 1000.0)]);
        let obs = Observation::new(
            vec![
                WorkloadResult::passed("w0", 250.0, String::new()),
                WorkloadResult::passed("w1", 2000.0, String::new()),
            ],
            String::new(),
        );
        let b = score(&task, &obs).unwrap();
        assert_eq!(b.per_workload[0].score, 200.0);
        assert_eq!(b.per_workload[1].score, 50.0);
        assert_eq!(b.aggregate, 125.0);
        assert_eq!(b.per_workload[0].speedup, 2.0);
    }

    #[test]
    fn any_failure_zeroes_everything() {
        let task = task_with(&[("w0", 500.0), ("w1", 1000.0)]);
        let obs = Observation::new(
            vec![
                WorkloadResult::passed("w0", 1.0, String::new()),
                WorkloadResult::failed("w1", WorkloadStatus::WrongAnswer, String::new()),
            ],
            String::new(),
        );
        let b = score(&task, &obs).unwrap();
        assert!(b.per_workload.iter().all(|w| w.score == 0.0 && w.speedup == 0.0));
        assert_eq!(b.aggregate, 0.0);
    }

    #[test]
    fn reference_parity_scores_100() {
        let task = task_with(&[("w0", 500.0)]);
        let obs = Observation::new(
            vec![WorkloadResult::passed("w0", 500.0, String::new())],
            String::new(),
        );
        assert_eq!(score(&task, &obs).unwrap().aggregate, 100.0);
    }

    #[test]
    fn misaligned_observation_rejected() {
        let task = task_with(&[("w0", 500.0)]);
        let obs = Observation::new(
            vec![WorkloadResult::passed("w_other", 500.0, String::new())],
            String::new(),
        );
        assert!(matches!(
            score(&task, &obs),
            Err(ScoreError::WorkloadMismatch(_))
        ));
    }

    #[test]
    fn fast_p_counts_threshold_hits() {
        let speedups = [2.0, 0.6, 0.5, 0.49, 1.0, 0.5, 0.51, 3.0];
        assert_eq!(fast_p(&speedups, 0.5).unwrap(), 0.875);
        assert_eq!(fast_p(&speedups, 1.0).unwrap(), 0.375);
        assert!(matches!(fast_p(&[], 0.5), Err(ScoreError::EmptyInput)));
    }
}
