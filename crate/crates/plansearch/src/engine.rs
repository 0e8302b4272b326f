//! The orchestration loop: selection, local refinement, world-model
//! evolution, with exact budget and stagnation accounting.
//!
//! Every evaluator invocation consumes one budget unit and advances the
//! round by one; nothing else does. Each step is committed to the trace
//! before the engine builds on it, and refinement state flows through the
//! same accumulator the replay fold uses, so a killed process resumes into
//! exactly the byte stream it would have written uninterrupted.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coder::{Coder, CoderError, CoderRequest};
use crate::eval::{EvalContext, EvalError, Evaluator};
use crate::planner::{
    tree_view, PlanPhase, Planner, PlannerError, PlannerRequest, PlannerResponse, RawExchange,
    RejectedEdit, TaskDigest, TrajectoryBest, TrajectorySummary, DEFAULT_EXCERPT_LIMIT,
};
use crate::score::{score, ScoreBreakdown};
use crate::task::Task;
use crate::text::truncate_tail;
use crate::trace::replay::{ClosedTrajectory, FoldResult, InFlight, Pending};
use crate::trace::snapshot::{write_snapshot, SnapshotPayload};
use crate::trace::{
    request_digest, BestRef, ExitStatus, RunConfigRecord, RunMode, TraceError, TraceEvent,
    TraceWriter, SNAPSHOT_DIR,
};
use crate::tree::{
    EditOutcome, NodeId, Observation, Program, ProgramId, ProgramOrigin, SearchState, TreeEdit,
};

/// Intent of the safety-net seed inserted when initialization produced no
/// usable plan.
pub const FALLBACK_SEED_INTENT: &str =
    "produce a correct baseline implementation of the reference";

fn default_budget() -> u32 {
    120
}
fn default_stagnation() -> u32 {
    7
}
fn default_retries() -> u32 {
    2
}
fn default_feedback() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Total evaluator invocations allowed (B).
    #[serde(rename = "budget", default = "default_budget")]
    pub budget_b: u32,
    /// Consecutive non-improving attempts that close a refinement (K).
    #[serde(rename = "stagnation", default = "default_stagnation")]
    pub stagnation_k: u32,
    /// Re-prompts allowed per planner call on malformed responses (R).
    #[serde(rename = "retries", default = "default_retries")]
    pub planner_retries_r: u32,
    /// Whether the previous attempt's outcome is fed to the next one.
    #[serde(default = "default_feedback")]
    pub feedback_on_retry: bool,
    /// Recorded for backends that sample; the engine itself is
    /// deterministic.
    #[serde(rename = "seed", default)]
    pub rng_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            budget_b: default_budget(),
            stagnation_k: default_stagnation(),
            planner_retries_r: default_retries(),
            feedback_on_retry: default_feedback(),
            rng_seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.budget_b < 1 {
            return Err("budget must be at least 1".to_owned());
        }
        if self.stagnation_k < 1 {
            return Err("stagnation limit must be at least 1".to_owned());
        }
        Ok(())
    }
}

/// Why a refinement stopped sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitReason {
    Stagnated,
    BudgetExhausted,
}

/// How one refinement concluded; recorded in NodeClosed and verified
/// against the replayed accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    pub node_id: NodeId,
    pub samples_evaluated: u32,
    pub generation_failures: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_program_id: Option<ProgramId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_score: Option<f64>,
    pub exit_reason: ExitReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub exit_status: ExitStatus,
    pub best_program_id: Option<ProgramId>,
    pub best_score: Option<f64>,
    pub best_program: Option<Program>,
    pub rounds_used: u32,
    pub budget_remaining: u32,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("engine invariant violated: {0}")]
    Internal(String),
}

/// One line of feedback handed to the next attempt, derived from the
/// previous attempt's observation. Deterministic.
pub fn sample_feedback(observation: &Observation, scores: &ScoreBreakdown) -> String {
    let text = match observation
        .workload_results
        .iter()
        .find(|r| r.latency_us.is_none())
    {
        Some(failure) => format!(
            "workload {} failed ({:?}): {}",
            failure.workload_id, failure.status, failure.log_excerpt
        ),
        None => format!(
            "previous attempt was correct with aggregate score {:.4}; improve performance further",
            scores.aggregate
        ),
    };
    truncate_tail(&text, DEFAULT_EXCERPT_LIMIT)
}

/// One history line per closure, shown to the planner in later rounds.
pub fn history_entry(outcome: &RefinementOutcome, intent: &str, improved: bool) -> String {
    match outcome.best_score {
        Some(best) => format!(
            "closed {} ({intent}) score {best:.4} after {} samples, {} failed generations{}",
            outcome.node_id,
            outcome.samples_evaluated,
            outcome.generation_failures,
            if improved { ", new run best" } else { "" }
        ),
        None => format!(
            "closed {} ({intent}) with no candidate after {} samples, {} failed generations",
            outcome.node_id, outcome.samples_evaluated, outcome.generation_failures
        ),
    }
}

/// Compact per-workload rendering of an observation for planner prompts.
pub fn observation_excerpt(observation: &Observation) -> String {
    let mut parts = Vec::with_capacity(observation.workload_results.len());
    for r in &observation.workload_results {
        match r.latency_us {
            Some(latency) => parts.push(format!("{} pass {latency}us", r.workload_id)),
            None => {
                let head: String = r.log_excerpt.chars().take(120).collect();
                parts.push(format!("{} {:?}: {head}", r.workload_id, r.status));
            }
        }
    }
    truncate_tail(&parts.join("; "), DEFAULT_EXCERPT_LIMIT)
}

/// Renders a closed trajectory for the evolve request.
pub fn summary_of(closed: &ClosedTrajectory) -> TrajectorySummary {
    TrajectorySummary {
        node_id: closed.outcome.node_id,
        intent: closed.intent.clone(),
        samples_evaluated: closed.outcome.samples_evaluated,
        generation_failures: closed.outcome.generation_failures,
        best: closed.outcome.best_score.map(|best| TrajectoryBest {
            program_id: closed
                .outcome
                .best_program_id
                .expect("a best score implies a best program"),
            score: best,
            observation_excerpt: closed
                .best_observation
                .as_ref()
                .map(observation_excerpt)
                .unwrap_or_default(),
        }),
        improved_run_best: closed.improved_run_best,
    }
}

/// Outcome of one planner call after the engine's retry loop.
enum PlannerCall {
    /// A usable response; the count is discarded malformed attempts.
    Usable(PlannerResponse, u32),
    /// Still malformed after R retries; the count is total attempts.
    Exhausted(u32),
    /// Backend unreachable: abort the run.
    Abort(String),
}

enum Refined {
    Closed(ClosedTrajectory),
    Abort(ExitStatus),
}

struct Engine<'a> {
    task: &'a Task,
    config: EngineConfig,
    planner: &'a mut dyn Planner,
    coder: &'a mut dyn Coder,
    evaluator: &'a mut dyn Evaluator,
    trace: &'a mut TraceWriter,
    state: SearchState,
    programs: BTreeMap<ProgramId, Program>,
    history: Vec<crate::planner::HistoryItem>,
    digest: TaskDigest,
    work_root: PathBuf,
}

/// Runs a fresh search, writing its trace into the writer's run directory.
pub fn run(
    task: &Task,
    config: EngineConfig,
    planner: &mut dyn Planner,
    coder: &mut dyn Coder,
    evaluator: &mut dyn Evaluator,
    trace: &mut TraceWriter,
) -> Result<RunResult, EngineError> {
    config.validate().map_err(EngineError::Config)?;
    let record = RunConfigRecord {
        mode: RunMode::Engine,
        engine: Some(config),
        baseline: None,
        planner: Some(planner.describe()),
        coder: Some(coder.describe()),
        mutator: None,
        evaluator: evaluator.describe(),
        clock: trace.clock_mode(),
    };
    let work_root = trace.run_dir().join("work");
    let mut engine = Engine {
        task,
        config,
        planner,
        coder,
        evaluator,
        trace,
        state: SearchState::new(task.objective_text.clone(), config.budget_b),
        programs: BTreeMap::new(),
        history: Vec::new(),
        digest: TaskDigest::of(task),
        work_root,
    };
    let mut start = vec![TraceEvent::RunStarted {
        config: record,
        task: task.clone(),
    }];
    if let Some(files) = &task.initial_program {
        let id = engine.state.alloc_program_id();
        let root = engine.state.root_id;
        let program = Program {
            id,
            files: files.clone(),
            parent_action_id: root,
            round: 0,
            created_from: ProgramOrigin::PlannerSeeded,
        };
        engine
            .state
            .nodes
            .get_mut(&root)
            .expect("root exists")
            .attached_program_id = Some(id);
        engine.programs.insert(id, program.clone());
        start.push(TraceEvent::InitialProgramAttached { program });
    }
    engine.trace.append_group(0, start)?;
    engine.drive(Pending::Init)
}

/// Continues a restored run. The fold carries any overrides the caller
/// already applied (extended budget, swapped backends); nothing is appended
/// to the log that an uninterrupted run would not have written.
pub fn resume(
    fold: FoldResult,
    task: &Task,
    planner: &mut dyn Planner,
    coder: &mut dyn Coder,
    evaluator: &mut dyn Evaluator,
    trace: &mut TraceWriter,
) -> Result<RunResult, EngineError> {
    let config = fold
        .config
        .engine
        .ok_or_else(|| EngineError::Config("resume of a non-engine run".to_owned()))?;
    config.validate().map_err(EngineError::Config)?;
    let work_root = trace.run_dir().join("work");
    let mut engine = Engine {
        task,
        config,
        planner,
        coder,
        evaluator,
        trace,
        state: fold.state,
        programs: fold.programs,
        history: fold.history,
        digest: TaskDigest::of(task),
        work_root,
    };
    match fold.pending {
        Pending::Ended(status) => Ok(engine.result(status)),
        Pending::Evolve => {
            let closed = fold.last_closed.ok_or_else(|| {
                EngineError::Internal("pending evolution without a closed trajectory".to_owned())
            })?;
            if let Some(abort) = engine.evolve_and_snapshot(&closed)? {
                return Ok(engine.result(abort));
            }
            engine.drive(Pending::Select)
        }
        other => engine.drive(other),
    }
}

impl Engine<'_> {
    fn drive(&mut self, start: Pending) -> Result<RunResult, EngineError> {
        let mut pending = start;
        loop {
            pending = match pending {
                Pending::Init => match self.do_init()? {
                    Some(abort) => return Ok(self.result(abort)),
                    None => Pending::Select,
                },
                Pending::Select => {
                    if self.state.budget_remaining == 0 {
                        return self.finish(ExitStatus::Completed);
                    }
                    let node_id = match self.state.select_action() {
                        Ok(id) => id,
                        Err(_) => match self.recover_frontier()? {
                            Recovery::Reopened(id) => id,
                            Recovery::Finished(result) => return Ok(result),
                        },
                    };
                    let node = &self.state.nodes[&node_id];
                    let (priority, intent) = (node.priority, node.intent.clone());
                    self.trace.append(
                        self.state.round,
                        TraceEvent::ActionSelected { node_id, priority },
                    )?;
                    Pending::Refine(InFlight::new(node_id, intent))
                }
                Pending::Refine(in_flight) => match self.do_refine(in_flight)? {
                    Refined::Abort(status) => return Ok(self.result(status)),
                    Refined::Closed(closed) => {
                        if self.state.budget_remaining > 0 {
                            if let Some(abort) = self.evolve_and_snapshot(&closed)? {
                                return Ok(self.result(abort));
                            }
                        }
                        Pending::Select
                    }
                },
                Pending::Evolve | Pending::Ended(_) => {
                    return Err(EngineError::Internal(
                        "resume entry states must be dispatched before the drive loop".to_owned(),
                    ));
                }
            };
        }
    }

    /// Initialization exchange: the planner seeds the frontier. Exhausted
    /// retries fall back to a single safety-net seed action.
    fn do_init(&mut self) -> Result<Option<ExitStatus>, EngineError> {
        let req = self.planner_request(PlanPhase::Init, None);
        let mut group = Vec::new();
        match self.call_planner(PlanPhase::Init, &req)? {
            PlannerCall::Abort(message) => {
                log::error!("planner backend failed during initialization: {message}");
                return Ok(Some(ExitStatus::BackendError));
            }
            PlannerCall::Usable(resp, retries) => {
                group.push(self.exchange_event(&req, retries, resp.raw_exchange.as_ref())?);
                let (events, rejected) = self.apply_edits(resp.edits);
                group.extend(events);
                if let Some(abort) = self.run_correction(&req, rejected, &mut group)? {
                    return Ok(Some(abort));
                }
            }
            PlannerCall::Exhausted(attempts) => {
                log::warn!(
                    "planner produced no usable initialization after {attempts} attempts; \
                     seeding a fallback action"
                );
                group.push(self.exchange_event(&req, attempts, None)?);
                let edit = TreeEdit::Insert {
                    parent: self.state.root_id,
                    intent: FALLBACK_SEED_INTENT.to_owned(),
                    priority: 0.5,
                };
                let outcome = self
                    .state
                    .apply_edit(&edit, self.state.round)
                    .expect("fallback insert under the root is always legal");
                let EditOutcome::Inserted(id) = outcome else {
                    unreachable!("insert yields an inserted id");
                };
                group.push(TraceEvent::EditApplied {
                    edit,
                    accepted: true,
                    reason: "fallback seed after exhausted retries".to_owned(),
                    assigned_node_id: Some(id),
                });
            }
        }
        self.trace.append_group(self.state.round, group)?;
        Ok(None)
    }

    /// One recovery exchange for an empty frontier. If the planner reopens
    /// it, selection proceeds; otherwise the run ends in the same atomic
    /// append, so a crash can never duplicate the recovery attempt.
    fn recover_frontier(&mut self) -> Result<Recovery, EngineError> {
        let req = self.planner_request(PlanPhase::Recovery, None);
        let mut group = Vec::new();
        match self.call_planner(PlanPhase::Recovery, &req)? {
            PlannerCall::Abort(message) => {
                log::error!("planner backend failed during frontier recovery: {message}");
                return Ok(Recovery::Finished(self.result(ExitStatus::BackendError)));
            }
            PlannerCall::Usable(resp, retries) => {
                group.push(self.exchange_event(&req, retries, resp.raw_exchange.as_ref())?);
                let (events, rejected) = self.apply_edits(resp.edits);
                group.extend(events);
                for r in rejected {
                    log::warn!("recovery edit dropped: {} ({:?})", r.reason, r.edit);
                }
            }
            PlannerCall::Exhausted(attempts) => {
                log::warn!("recovery produced no usable response after {attempts} attempts");
                group.push(self.exchange_event(&req, attempts, None)?);
            }
        }
        match self.state.select_action() {
            Ok(id) => {
                self.trace.append_group(self.state.round, group)?;
                Ok(Recovery::Reopened(id))
            }
            Err(_) => {
                let status = ExitStatus::FrontierExhausted;
                group.push(TraceEvent::RunEnded {
                    exit_status: status,
                    best: self.best_ref(),
                });
                self.trace.append_group(self.state.round, group)?;
                self.verify_replay();
                Ok(Recovery::Finished(self.result(status)))
            }
        }
    }

    /// Samples implementations for one selected action until K consecutive
    /// non-improvements or budget exhaustion, then closes the node.
    fn do_refine(&mut self, mut fl: InFlight) -> Result<Refined, EngineError> {
        let exit_reason = loop {
            if fl.stall >= self.config.stagnation_k {
                break ExitReason::Stagnated;
            }
            if self.state.budget_remaining == 0 {
                break ExitReason::BudgetExhausted;
            }
            // A program restored from the log tail is evaluated as-is; a
            // regenerated one could differ and break the recorded ledger.
            let program = match fl.pending_program.clone() {
                Some(program) => program,
                None => match self.generate_candidate(&mut fl)? {
                    Generated::Program(program) => program,
                    Generated::Failed => continue,
                    Generated::Abort(status) => return Ok(Refined::Abort(status)),
                },
            };
            let ctx = EvalContext {
                round: self.state.round + 1,
                work_root: Some(&self.work_root),
            };
            let observation = match self.evaluator.evaluate(self.task, &program, &ctx) {
                Ok(obs) => obs,
                Err(EvalError::Infrastructure(message)) => {
                    log::error!("evaluator infrastructure failure: {message}");
                    return Ok(Refined::Abort(ExitStatus::InfrastructureError));
                }
            };
            let scores = match score(self.task, &observation) {
                Ok(scores) => scores,
                Err(e) => {
                    log::error!("evaluator returned an unscorable observation: {e}");
                    return Ok(Refined::Abort(ExitStatus::InfrastructureError));
                }
            };
            self.state.round += 1;
            self.state.budget_remaining -= 1;
            self.trace.append(
                self.state.round,
                TraceEvent::CandidateEvaluated {
                    program_id: program.id,
                    observation: observation.clone(),
                    scores: scores.clone(),
                },
            )?;
            fl.on_evaluated(program.id, &observation, &scores);
        };

        let outcome = fl.outcome(exit_reason);
        let improved =
            outcome.best_score.unwrap_or(f64::NEG_INFINITY) > self.state.best_score_or_neg_inf();
        self.trace
            .append(self.state.round, TraceEvent::NodeClosed { outcome })?;
        self.state
            .record_closure(outcome.node_id, outcome.best_program_id, outcome.best_score)
            .map_err(|e| EngineError::Internal(format!("closure of selected node failed: {e}")))?;
        self.history.push(crate::planner::HistoryItem {
            round: self.state.round,
            summary: history_entry(&outcome, &fl.intent, improved),
        });
        Ok(Refined::Closed(ClosedTrajectory {
            outcome,
            intent: fl.intent.clone(),
            best_observation: fl.best_observation.clone(),
            improved_run_best: improved,
        }))
    }

    /// One coder attempt. Successful generations are committed to the trace
    /// before evaluation starts; failures burn the allocated program id.
    fn generate_candidate(&mut self, fl: &mut InFlight) -> Result<Generated, EngineError> {
        let program_id = self.state.alloc_program_id();
        let req = CoderRequest {
            task_digest: self.digest.clone(),
            intent: fl.intent.clone(),
            parent_program: self.parent_program_of(fl.node_id),
            attempt_index: fl.attempt_index,
            feedback: if self.config.feedback_on_retry {
                fl.last_feedback.clone()
            } else {
                None
            },
            sampling_temperature: self.coder.default_temperature(),
            new_program_id: program_id,
            parent_action_id: fl.node_id,
            round: self.state.round + 1,
            origin: ProgramOrigin::RefinementSample,
        };
        match self.coder.generate(&req) {
            Ok(generated) => {
                let program = generated.program;
                if program.id != program_id || program.parent_action_id != fl.node_id {
                    return Err(EngineError::Internal(format!(
                        "coder returned identity {}/{}, requested {program_id}/{}",
                        program.id, program.parent_action_id, fl.node_id
                    )));
                }
                let coder_blob = generated
                    .raw_exchange
                    .as_ref()
                    .map(|x| self.trace.store_blob(x))
                    .transpose()?;
                self.trace.append(
                    self.state.round,
                    TraceEvent::CandidateGenerated {
                        node_id: fl.node_id,
                        attempt_index: fl.attempt_index,
                        program: program.clone(),
                        coder_blob,
                    },
                )?;
                self.programs.insert(program.id, program.clone());
                fl.on_generated(program.clone());
                Ok(Generated::Program(program))
            }
            Err(CoderError::Generation(reason)) => {
                self.trace.append(
                    self.state.round,
                    TraceEvent::GenerationFailed {
                        node_id: fl.node_id,
                        program_id,
                        attempt_index: fl.attempt_index,
                        reason: reason.clone(),
                    },
                )?;
                fl.on_generation_failed(&reason);
                Ok(Generated::Failed)
            }
            Err(CoderError::Backend(message)) => {
                log::error!("coder backend failed: {message}");
                Ok(Generated::Abort(ExitStatus::BackendError))
            }
        }
    }

    /// Evolution exchange after a closure, then a snapshot of the reached
    /// state. Returns an abort status on backend failure.
    fn evolve_and_snapshot(
        &mut self,
        closed: &ClosedTrajectory,
    ) -> Result<Option<ExitStatus>, EngineError> {
        let req = self.planner_request(PlanPhase::Evolve, Some(summary_of(closed)));
        let mut group = Vec::new();
        match self.call_planner(PlanPhase::Evolve, &req)? {
            PlannerCall::Abort(message) => {
                log::error!("planner backend failed during evolution: {message}");
                return Ok(Some(ExitStatus::BackendError));
            }
            PlannerCall::Usable(resp, retries) => {
                group.push(self.exchange_event(&req, retries, resp.raw_exchange.as_ref())?);
                let (events, rejected) = self.apply_edits(resp.edits);
                group.extend(events);
                if let Some(abort) = self.run_correction(&req, rejected, &mut group)? {
                    return Ok(Some(abort));
                }
            }
            PlannerCall::Exhausted(attempts) => {
                log::warn!(
                    "planner produced no usable evolution after {attempts} attempts; \
                     continuing with the frontier as-is"
                );
                group.push(self.exchange_event(&req, attempts, None)?);
            }
        }
        self.trace.append_group(self.state.round, group)?;
        self.snapshot()?;
        self.verify_replay();
        Ok(None)
    }

    /// One correction round for rejected edits (init and evolve phases).
    /// Edits still invalid afterwards are dropped.
    fn run_correction(
        &mut self,
        base: &PlannerRequest,
        rejected: Vec<RejectedEdit>,
        group: &mut Vec<TraceEvent>,
    ) -> Result<Option<ExitStatus>, EngineError> {
        if rejected.is_empty() {
            return Ok(None);
        }
        let mut req = base.clone();
        req.tree_view = tree_view(&self.state);
        req.rejected = rejected;
        match self.planner.plan_correction(&req) {
            Ok(resp) => {
                group.push(self.correction_event(&req, resp.raw_exchange.as_ref())?);
                let (events, still_rejected) = self.apply_edits(resp.edits);
                group.extend(events);
                for r in still_rejected {
                    log::warn!("edit dropped after correction: {} ({:?})", r.reason, r.edit);
                }
                Ok(None)
            }
            Err(PlannerError::Malformed(e)) => {
                log::warn!("correction response unusable, dropping rejected edits: {e}");
                Ok(None)
            }
            Err(PlannerError::Backend(message)) => {
                log::error!("planner backend failed during correction: {message}");
                Ok(Some(ExitStatus::BackendError))
            }
        }
    }

    /// Calls the planner for a phase, re-prompting on malformed responses
    /// up to the configured retry limit.
    fn call_planner(
        &mut self,
        phase: PlanPhase,
        base: &PlannerRequest,
    ) -> Result<PlannerCall, EngineError> {
        let mut req = base.clone();
        let mut retries = 0u32;
        loop {
            let attempt = match phase {
                PlanPhase::Init => self.planner.plan_init(self.task, &req),
                PlanPhase::Evolve => self.planner.plan_evolve(&req),
                PlanPhase::Recovery => self.planner.plan_recovery(&req),
            };
            match attempt {
                Ok(resp) => return Ok(PlannerCall::Usable(resp, retries)),
                Err(PlannerError::Malformed(e)) => {
                    if retries >= self.config.planner_retries_r {
                        return Ok(PlannerCall::Exhausted(retries + 1));
                    }
                    retries += 1;
                    req.retry_feedback = Some(e.to_string());
                }
                Err(PlannerError::Backend(message)) => return Ok(PlannerCall::Abort(message)),
            }
        }
    }

    /// Applies edits in response order; each produces one EditApplied event
    /// whether accepted or not.
    fn apply_edits(&mut self, edits: Vec<TreeEdit>) -> (Vec<TraceEvent>, Vec<RejectedEdit>) {
        let round = self.state.round;
        let mut events = Vec::with_capacity(edits.len());
        let mut rejected = Vec::new();
        for edit in edits {
            match self.state.apply_edit(&edit, round) {
                Ok(outcome) => {
                    let assigned_node_id = match outcome {
                        EditOutcome::Inserted(id) => Some(id),
                        _ => None,
                    };
                    events.push(TraceEvent::EditApplied {
                        edit,
                        accepted: true,
                        reason: String::new(),
                        assigned_node_id,
                    });
                }
                Err(e) => {
                    let reason = e.to_string();
                    rejected.push(RejectedEdit {
                        edit: edit.clone(),
                        reason: reason.clone(),
                    });
                    events.push(TraceEvent::EditApplied {
                        edit,
                        accepted: false,
                        reason,
                        assigned_node_id: None,
                    });
                }
            }
        }
        (events, rejected)
    }

    fn planner_request(
        &self,
        phase: PlanPhase,
        last_trajectory: Option<TrajectorySummary>,
    ) -> PlannerRequest {
        PlannerRequest {
            phase,
            task_digest: self.digest.clone(),
            tree_view: tree_view(&self.state),
            last_trajectory,
            history_window: self.history.clone(),
            best_score: self.state.best_score,
            budget_remaining: self.state.budget_remaining,
            round: self.state.round,
            rejected: Vec::new(),
            retry_feedback: None,
        }
    }

    fn exchange_event(
        &self,
        req: &PlannerRequest,
        retries_used: u32,
        raw: Option<&RawExchange>,
    ) -> Result<TraceEvent, TraceError> {
        let response_blob = raw.map(|x| self.trace.store_blob(x)).transpose()?;
        Ok(TraceEvent::PlannerExchange {
            phase: req.phase,
            correction: false,
            request_digest: request_digest(req),
            response_blob,
            retries_used,
        })
    }

    fn correction_event(
        &self,
        req: &PlannerRequest,
        raw: Option<&RawExchange>,
    ) -> Result<TraceEvent, TraceError> {
        let response_blob = raw.map(|x| self.trace.store_blob(x)).transpose()?;
        Ok(TraceEvent::PlannerExchange {
            phase: req.phase,
            correction: true,
            request_digest: request_digest(req),
            response_blob,
            retries_used: 0,
        })
    }

    /// Nearest ancestor-attached program: the implementation a new sample
    /// builds on.
    fn parent_program_of(&self, node_id: NodeId) -> Option<Program> {
        self.state.nearest_attached_program(node_id).map(|pid| {
            self.programs
                .get(&pid)
                .expect("attached programs are retained")
                .clone()
        })
    }

    /// Persists the state reached at the bottom of the loop. Only programs
    /// still reachable (node attachments, run best) are embedded.
    fn snapshot(&self) -> Result<(), EngineError> {
        let mut programs = BTreeMap::new();
        let mut keep = |pid: Option<ProgramId>| {
            if let Some(pid) = pid {
                if let Some(p) = self.programs.get(&pid) {
                    programs.insert(pid, p.clone());
                }
            }
        };
        for node in self.state.nodes.values() {
            keep(node.attached_program_id);
        }
        keep(self.state.best_program_id);
        let payload = SnapshotPayload {
            last_seq: self.trace.next_seq() - 1,
            round: self.state.round,
            state: self.state.clone(),
            programs,
            history: self.history.clone(),
        };
        write_snapshot(&self.trace.run_dir().join(SNAPSHOT_DIR), &payload)?;
        Ok(())
    }

    fn best_ref(&self) -> BestRef {
        BestRef {
            program_id: self.state.best_program_id,
            score: self.state.best_score,
        }
    }

    fn result(&self, exit_status: ExitStatus) -> RunResult {
        RunResult {
            exit_status,
            best_program_id: self.state.best_program_id,
            best_score: self.state.best_score,
            best_program: self
                .state
                .best_program_id
                .and_then(|pid| self.programs.get(&pid))
                .cloned(),
            rounds_used: self.state.round,
            budget_remaining: self.state.budget_remaining,
        }
    }

    /// Normal completion: the only writer of RunEnded outside recovery.
    fn finish(&mut self, status: ExitStatus) -> Result<RunResult, EngineError> {
        self.trace.append(
            self.state.round,
            TraceEvent::RunEnded {
                exit_status: status,
                best: self.best_ref(),
            },
        )?;
        self.verify_replay();
        Ok(self.result(status))
    }

    /// Debug builds refold the whole log from scratch and assert it
    /// reproduces the live state exactly.
    #[cfg(debug_assertions)]
    fn verify_replay(&self) {
        use crate::trace::{load_overrides, scan_log, TRACE_FILE};
        let scan =
            scan_log(&self.trace.run_dir().join(TRACE_FILE)).expect("own log scans cleanly");
        let extra = load_overrides(self.trace.run_dir())
            .map(|o| o.total_added())
            .unwrap_or(0);
        let fold = crate::trace::replay::fold_records(&scan.records, None, extra)
            .expect("own log refolds cleanly");
        assert_eq!(fold.state, self.state, "live state diverged from replay");
        assert_eq!(fold.history, self.history, "history diverged from replay");
    }

    #[cfg(not(debug_assertions))]
    fn verify_replay(&self) {}
}

enum Recovery {
    Reopened(NodeId),
    Finished(RunResult),
}

enum Generated {
    Program(Program),
    Failed,
    Abort(ExitStatus),
}
