//! Log replay: folds an event log back into live engine state.
//!
//! The fold applies exactly the mutations the engine applied when it wrote
//! each event, and cross-checks every derived value the log records (edit
//! outcomes, id allocation, selections, budget). Any mismatch is a replay
//! divergence, never silently patched. The engine drives its refinements
//! through the same [`InFlight`] accumulator the fold uses, so the two
//! cannot drift apart.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{history_entry, sample_feedback, ExitReason, RefinementOutcome};
use crate::planner::{HistoryItem, PlanPhase};
use crate::score::ScoreBreakdown;
use crate::task::Task;
use crate::tree::{NodeId, Observation, Program, ProgramId, SearchState};

use super::snapshot::{latest_valid_snapshot, SnapshotPayload};
use super::{
    scan_log, ExitStatus, RunConfigRecord, RunMode, TraceError, TraceEvent, TraceRecord,
    SNAPSHOT_DIR, TRACE_FILE,
};

/// Accumulator for one refinement. Shared between the live engine and the
/// fold so both compute identical stagnation, best, and feedback state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InFlight {
    pub node_id: NodeId,
    pub intent: String,
    /// Index the next attempt will carry (attempts = samples + failures).
    pub attempt_index: u32,
    pub samples_evaluated: u32,
    pub generation_failures: u32,
    pub best_program_id: Option<ProgramId>,
    pub best_score: Option<f64>,
    pub best_observation: Option<Observation>,
    /// Consecutive attempts without strict improvement.
    pub stall: u32,
    /// Generated and logged but not yet evaluated; a resumed run evaluates
    /// it directly instead of regenerating.
    pub pending_program: Option<Program>,
    /// Feedback for the next attempt, from the previous attempt's outcome.
    pub last_feedback: Option<String>,
}

impl InFlight {
    pub fn new(node_id: NodeId, intent: String) -> InFlight {
        InFlight {
            node_id,
            intent,
            attempt_index: 0,
            samples_evaluated: 0,
            generation_failures: 0,
            best_program_id: None,
            best_score: None,
            best_observation: None,
            stall: 0,
            pending_program: None,
            last_feedback: None,
        }
    }

    pub fn best_score_or_neg_inf(&self) -> f64 {
        self.best_score.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn on_generated(&mut self, program: Program) {
        self.pending_program = Some(program);
    }

    /// Applies one evaluated sample: strict improvement resets the stall
    /// counter, anything else increments it.
    pub fn on_evaluated(
        &mut self,
        program_id: ProgramId,
        observation: &Observation,
        scores: &ScoreBreakdown,
    ) {
        self.pending_program = None;
        self.samples_evaluated += 1;
        self.attempt_index += 1;
        if scores.aggregate > self.best_score_or_neg_inf() {
            self.best_score = Some(scores.aggregate);
            self.best_program_id = Some(program_id);
            self.best_observation = Some(observation.clone());
            self.stall = 0;
        } else {
            self.stall += 1;
        }
        self.last_feedback = Some(sample_feedback(observation, scores));
    }

    /// A failed generation counts toward stagnation but not budget.
    pub fn on_generation_failed(&mut self, reason: &str) {
        self.pending_program = None;
        self.generation_failures += 1;
        self.attempt_index += 1;
        self.stall += 1;
        self.last_feedback = Some(reason.to_owned());
    }

    pub fn outcome(&self, exit_reason: ExitReason) -> RefinementOutcome {
        RefinementOutcome {
            node_id: self.node_id,
            samples_evaluated: self.samples_evaluated,
            generation_failures: self.generation_failures,
            best_program_id: self.best_program_id,
            best_score: self.best_score,
            exit_reason,
        }
    }
}

/// What a just-finished refinement hands to the evolution step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedTrajectory {
    pub outcome: RefinementOutcome,
    pub intent: String,
    pub best_observation: Option<Observation>,
    pub improved_run_best: bool,
}

/// The next step a run at this log position would take.
#[derive(Debug, Clone, PartialEq)]
pub enum Pending {
    /// RunStarted only: the initialization exchange has not happened.
    Init,
    /// Between steps: select (or recover, or finish) next.
    Select,
    /// Mid-refinement.
    Refine(InFlight),
    /// Closure recorded, evolution exchange not yet.
    Evolve,
    Ended(ExitStatus),
}

#[derive(Debug)]
pub struct FoldResult {
    pub config: RunConfigRecord,
    pub task: Task,
    pub state: SearchState,
    pub programs: BTreeMap<ProgramId, Program>,
    pub history: Vec<HistoryItem>,
    /// Most recent closed trajectory; present whenever pending = Evolve.
    pub last_closed: Option<ClosedTrajectory>,
    pub pending: Pending,
    pub last_seq: u64,
    pub last_round: u32,
    /// CandidateEvaluated count: the budget ledger.
    pub evaluations: u64,
    /// Generation attempts (successes + failures); the baseline step index.
    pub generation_attempts: u64,
}

fn replay_err(seq: u64, message: impl std::fmt::Display) -> TraceError {
    TraceError::Replay(format!("event seq {seq}: {message}"))
}

/// Folds an engine-mode event log (optionally starting from a snapshot)
/// back into live state. `extra_budget` is the sum of post-hoc extensions
/// not already baked into the starting point (see [`super::Overrides`]).
pub fn fold_records(
    records: &[TraceRecord],
    from: Option<SnapshotPayload>,
    extra_budget: u32,
) -> Result<FoldResult, TraceError> {
    let first = records
        .first()
        .ok_or_else(|| TraceError::Invalid("trace has no RunStarted event".to_owned()))?;
    let TraceEvent::RunStarted { config, task } = &first.event else {
        return Err(replay_err(first.seq, "first event is not RunStarted"));
    };
    if config.mode != RunMode::Engine {
        return Err(TraceError::Invalid(
            "state replay is defined for engine runs only".to_owned(),
        ));
    }
    let engine_config = config
        .engine
        .ok_or_else(|| TraceError::Invalid("engine run without engine config".to_owned()))?;

    let (mut state, mut programs, mut history, skip_through) = match from {
        Some(snap) => (snap.state, snap.programs, snap.history, snap.last_seq),
        None => (
            SearchState::new(task.objective_text.clone(), engine_config.budget_b),
            BTreeMap::new(),
            Vec::new(),
            1, // RunStarted itself is consumed above
        ),
    };
    state.budget_remaining += extra_budget;
    let mut pending = if skip_through > 1 { Pending::Select } else { Pending::Init };
    let mut last_closed: Option<ClosedTrajectory> = None;
    let mut evaluations = 0u64;
    let mut generation_attempts = 0u64;
    let mut last_seq = skip_through.max(1);
    let mut last_round = 0u32;

    for record in records {
        if record.seq <= skip_through {
            if let TraceEvent::CandidateEvaluated { .. } = record.event {
                evaluations += 1;
            }
            if matches!(
                record.event,
                TraceEvent::CandidateGenerated { .. } | TraceEvent::GenerationFailed { .. }
            ) {
                generation_attempts += 1;
            }
            last_round = record.round;
            continue;
        }
        let seq = record.seq;
        match &record.event {
            TraceEvent::RunStarted { .. } => {
                return Err(replay_err(seq, "duplicate RunStarted"));
            }
            TraceEvent::InitialProgramAttached { program } => {
                let expected = state.alloc_program_id();
                if expected != program.id {
                    return Err(replay_err(
                        seq,
                        format!("initial program id {} != allocation {}", program.id, expected),
                    ));
                }
                let root = state.root_id;
                state
                    .nodes
                    .get_mut(&root)
                    .expect("root exists")
                    .attached_program_id = Some(program.id);
                programs.insert(program.id, program.clone());
            }
            TraceEvent::PlannerExchange { phase, correction, .. } => {
                if !correction {
                    match phase {
                        PlanPhase::Init => {
                            if pending != Pending::Init {
                                return Err(replay_err(seq, "init exchange outside init phase"));
                            }
                        }
                        PlanPhase::Evolve => {
                            if pending != Pending::Evolve {
                                return Err(replay_err(
                                    seq,
                                    "evolve exchange without a pending closure",
                                ));
                            }
                        }
                        PlanPhase::Recovery => {
                            if pending != Pending::Select {
                                return Err(replay_err(
                                    seq,
                                    "recovery exchange outside selection",
                                ));
                            }
                        }
                    }
                }
                pending = Pending::Select;
            }
            TraceEvent::EditApplied {
                edit,
                accepted,
                assigned_node_id,
                ..
            } => {
                if *accepted {
                    let outcome = state
                        .apply_edit(edit, record.round)
                        .map_err(|e| replay_err(seq, format!("accepted edit fails: {e}")))?;
                    let inserted = match outcome {
                        crate::tree::EditOutcome::Inserted(id) => Some(id),
                        _ => None,
                    };
                    if inserted != *assigned_node_id {
                        return Err(replay_err(
                            seq,
                            format!(
                                "edit assigned {:?}, replay produced {:?}",
                                assigned_node_id, inserted
                            ),
                        ));
                    }
                }
            }
            TraceEvent::ActionSelected { node_id, priority } => {
                let derived = state
                    .select_action()
                    .map_err(|e| replay_err(seq, format!("selection impossible: {e}")))?;
                if derived != *node_id {
                    return Err(replay_err(
                        seq,
                        format!("selected {node_id}, replay selects {derived}"),
                    ));
                }
                let node = &state.nodes[node_id];
                if node.priority != *priority {
                    return Err(replay_err(
                        seq,
                        format!("priority {} != node priority {}", priority, node.priority),
                    ));
                }
                pending = Pending::Refine(InFlight::new(*node_id, node.intent.clone()));
            }
            TraceEvent::CandidateGenerated {
                node_id,
                attempt_index,
                program,
                ..
            } => {
                let Pending::Refine(fl) = &mut pending else {
                    return Err(replay_err(seq, "candidate outside a refinement"));
                };
                if fl.node_id != *node_id || fl.attempt_index != *attempt_index {
                    return Err(replay_err(
                        seq,
                        format!(
                            "candidate for {node_id} attempt {attempt_index}, replay at {} attempt {}",
                            fl.node_id, fl.attempt_index
                        ),
                    ));
                }
                let expected = state.alloc_program_id();
                if expected != program.id {
                    return Err(replay_err(
                        seq,
                        format!("program id {} != allocation {}", program.id, expected),
                    ));
                }
                programs.insert(program.id, program.clone());
                fl.on_generated(program.clone());
                generation_attempts += 1;
            }
            TraceEvent::GenerationFailed {
                node_id,
                program_id,
                attempt_index,
                reason,
            } => {
                let Pending::Refine(fl) = &mut pending else {
                    return Err(replay_err(seq, "generation failure outside a refinement"));
                };
                if fl.node_id != *node_id || fl.attempt_index != *attempt_index {
                    return Err(replay_err(seq, "generation failure out of order"));
                }
                let expected = state.alloc_program_id();
                if expected != *program_id {
                    return Err(replay_err(
                        seq,
                        format!("burned id {} != allocation {}", program_id, expected),
                    ));
                }
                fl.on_generation_failed(reason);
                generation_attempts += 1;
            }
            TraceEvent::CandidateEvaluated {
                program_id,
                observation,
                scores,
            } => {
                let Pending::Refine(fl) = &mut pending else {
                    return Err(replay_err(seq, "evaluation outside a refinement"));
                };
                if fl.pending_program.as_ref().map(|p| p.id) != Some(*program_id) {
                    return Err(replay_err(
                        seq,
                        format!("evaluation of {program_id} without its generation"),
                    ));
                }
                if state.budget_remaining == 0 {
                    return Err(replay_err(seq, "evaluation with zero budget"));
                }
                state.round += 1;
                state.budget_remaining -= 1;
                if record.round != state.round {
                    return Err(replay_err(
                        seq,
                        format!("round stamp {} != replayed round {}", record.round, state.round),
                    ));
                }
                fl.on_evaluated(*program_id, observation, scores);
                evaluations += 1;
            }
            TraceEvent::NodeClosed { outcome } => {
                let Pending::Refine(fl) = &pending else {
                    return Err(replay_err(seq, "closure outside a refinement"));
                };
                let derived = fl.outcome(outcome.exit_reason);
                if derived != *outcome {
                    return Err(replay_err(
                        seq,
                        format!("closure outcome {outcome:?} != replayed {derived:?}"),
                    ));
                }
                let improved =
                    outcome.best_score.unwrap_or(f64::NEG_INFINITY) > state.best_score_or_neg_inf();
                state
                    .record_closure(outcome.node_id, outcome.best_program_id, outcome.best_score)
                    .map_err(|e| replay_err(seq, format!("closure fails: {e}")))?;
                history.push(HistoryItem {
                    round: record.round,
                    summary: history_entry(outcome, &fl.intent, improved),
                });
                last_closed = Some(ClosedTrajectory {
                    outcome: *outcome,
                    intent: fl.intent.clone(),
                    best_observation: fl.best_observation.clone(),
                    improved_run_best: improved,
                });
                pending = if state.budget_remaining > 0 {
                    Pending::Evolve
                } else {
                    Pending::Select
                };
            }
            TraceEvent::ArchiveUpdated { .. } => {
                return Err(replay_err(seq, "archive event in an engine trace"));
            }
            TraceEvent::RunEnded { exit_status, .. } => {
                pending = Pending::Ended(*exit_status);
            }
        }
        last_seq = seq;
        last_round = record.round;
    }

    Ok(FoldResult {
        config: config.clone(),
        task: task.clone(),
        state,
        programs,
        history,
        last_closed,
        pending,
        last_seq,
        last_round,
        evaluations,
        generation_attempts,
    })
}

#[derive(Debug)]
pub struct RestoredRun {
    pub fold: FoldResult,
    /// Byte length of the well-formed log prefix; the writer truncates to
    /// this before appending.
    pub valid_len: u64,
    pub next_seq: u64,
    pub dropped_tail: bool,
}

/// Restores a run directory: latest valid snapshot plus tail replay, or a
/// full fold when no usable snapshot exists.
pub fn restore(run_dir: &Path) -> Result<RestoredRun, TraceError> {
    let scan = scan_log(&run_dir.join(TRACE_FILE))?;
    if scan.records.is_empty() {
        return Err(TraceError::Invalid(format!(
            "{} has no complete events",
            run_dir.join(TRACE_FILE).display()
        )));
    }
    let tip = scan.records.last().expect("nonempty").seq;
    let snapshot = latest_valid_snapshot(&run_dir.join(SNAPSHOT_DIR)).and_then(|(path, snap)| {
        if snap.last_seq <= tip {
            Some(snap)
        } else {
            log::warn!(
                "snapshot {} is ahead of the log (seq {} > {}); ignoring it",
                path.display(),
                snap.last_seq,
                tip
            );
            None
        }
    });
    // A snapshot taken after a budget extension already carries it; only
    // grants at or after its last covered seq still need applying.
    let overrides = super::load_overrides(run_dir)?;
    let extra = match &snapshot {
        Some(snap) => overrides.added_since(snap.last_seq),
        None => overrides.total_added(),
    };
    let fold = fold_records(&scan.records, snapshot, extra)?;
    Ok(RestoredRun {
        fold,
        valid_len: scan.valid_len,
        next_seq: tip + 1,
        dropped_tail: scan.dropped_tail,
    })
}
