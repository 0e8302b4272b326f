//! Planning backends: the world model that maintains the hypothesis tree.
//!
//! A planner receives a rendered view of the search state plus the latest
//! refinement trajectory and answers with an ordered list of tree edits.
//! Backends: an LLM adapter speaking the structured-output contract and a
//! deterministic rule-table planner for tests and offline runs.

pub mod llm;
pub mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{FileSpec, Task, Workload};
use crate::text::truncate_tail;
use crate::tree::{NodeId, NodeStatus, ProgramId, SearchState, TreeEdit};

/// Cap on observation excerpts shown to the planner.
pub const DEFAULT_EXCERPT_LIMIT: usize = 2048;

/// Cap on the rendered history window.
pub const DEFAULT_HISTORY_BYTE_BUDGET: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanPhase {
    Init,
    Evolve,
    Recovery,
}

/// Task fields backends may quote in prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDigest {
    pub objective_text: String,
    pub reference_impl: String,
    pub instructions: String,
    pub file_manifest: Vec<FileSpec>,
    pub workloads: Vec<Workload>,
}

impl TaskDigest {
    pub fn of(task: &Task) -> TaskDigest {
        TaskDigest {
            objective_text: task.objective_text.clone(),
            reference_impl: task.reference_impl.clone(),
            instructions: task.instructions.clone(),
            file_manifest: task.file_manifest.clone(),
            workloads: task.workloads.clone(),
        }
    }
}

/// One node as the planner sees it. Pruned nodes appear as tombstones
/// (status, intent, and the round they were pruned).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<NodeId>,
    pub intent: String,
    pub status: NodeStatus,
    /// Present while open.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priority: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached_score: Option<f64>,
    pub inserted_round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_round: Option<u32>,
}

/// Renders the full tree (small by construction) for a planner request.
pub fn tree_view(state: &SearchState) -> Vec<NodeView> {
    state
        .nodes
        .values()
        .map(|n| NodeView {
            id: n.id,
            parent: n.parent,
            intent: n.intent.clone(),
            status: n.status,
            priority: (n.status == NodeStatus::Open).then_some(n.priority),
            attached_score: n.attached_score,
            inserted_round: n.inserted_round,
            pruned_round: n.pruned_round,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBest {
    pub program_id: ProgramId,
    pub score: f64,
    pub observation_excerpt: String,
}

/// Summary of the refinement that just concluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub node_id: NodeId,
    pub intent: String,
    pub samples_evaluated: u32,
    pub generation_failures: u32,
    /// Absent when no candidate was ever evaluated: an explicit
    /// no-candidate marker, never a fabricated observation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best: Option<TrajectoryBest>,
    /// Whether this refinement improved the run-level best.
    pub improved_run_best: bool,
}

/// One line of the bounded history window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub round: u32,
    pub summary: String,
}

/// Renders the history window, newest last, dropping the oldest entries
/// that do not fit the byte budget. Never exceeds the budget.
pub fn render_history(items: &[HistoryItem], byte_budget: usize) -> String {
    let lines: Vec<String> = items
        .iter()
        .map(|h| format!("r{:03}: {}", h.round, h.summary))
        .collect();
    let mut kept = 0usize; // number of newest lines that fit
    let mut used = 0usize;
    for line in lines.iter().rev() {
        let extra = line.len() + usize::from(kept > 0);
        let elision_reserve = if kept + 1 < lines.len() { 40 } else { 0 };
        if used + extra + elision_reserve > byte_budget {
            break;
        }
        used += extra;
        kept += 1;
    }
    let dropped = lines.len() - kept;
    let mut out = String::new();
    if dropped > 0 {
        out.push_str(&format!("[{dropped} earlier rounds elided]"));
    }
    for line in &lines[dropped..] {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(line);
    }
    if out.len() > byte_budget {
        out = truncate_tail(&out, byte_budget);
    }
    out
}

/// An edit the engine refused, echoed back for one correction round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedEdit {
    pub edit: TreeEdit,
    pub reason: String,
}

/// Everything a planner call may condition on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRequest {
    pub phase: PlanPhase,
    pub task_digest: TaskDigest,
    pub tree_view: Vec<NodeView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_trajectory: Option<TrajectorySummary>,
    pub history_window: Vec<HistoryItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_score: Option<f64>,
    pub budget_remaining: u32,
    pub round: u32,
    /// Edits rejected in the immediately preceding response, for the one
    /// correction round.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<RejectedEdit>,
    /// Parse error of the previous malformed response, for re-prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerResponse {
    pub edits: Vec<TreeEdit>,
    /// Free text around the edits block; stored, never interpreted.
    pub commentary: String,
    /// Raw wire exchange for blob storage; None for scripted backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_exchange: Option<RawExchange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExchange {
    pub request_body: String,
    pub response_body: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("priority {value} out of range [0, 1] in {fragment:?}")]
    OutOfRange { value: f64, fragment: String },
    #[error("malformed edits payload: {message} in {fragment:?}")]
    Malformed { message: String, fragment: String },
}

#[derive(Debug, Error)]
pub enum PlannerError {
    /// Unusable response; the engine re-prompts up to R times.
    #[error("malformed planner response: {0}")]
    Malformed(ParseError),
    /// Backend unreachable after its own retries; the run aborts.
    #[error("planner backend unavailable: {0}")]
    Backend(String),
}

pub trait Planner {
    fn plan_init(&mut self, task: &Task, req: &PlannerRequest)
        -> Result<PlannerResponse, PlannerError>;

    fn plan_evolve(&mut self, req: &PlannerRequest) -> Result<PlannerResponse, PlannerError>;

    fn plan_recovery(&mut self, req: &PlannerRequest) -> Result<PlannerResponse, PlannerError>;

    /// One correction round for rejected edits (`req.rejected` non-empty).
    /// Still-invalid edits are dropped by the engine afterwards.
    fn plan_correction(&mut self, req: &PlannerRequest) -> Result<PlannerResponse, PlannerError>;

    /// Short spec string recorded in traces.
    fn describe(&self) -> String;
}

#[derive(Deserialize)]
struct EditsEnvelope {
    edits: Vec<TreeEdit>,
}

/// Extracts the edits from backend text: the last fenced code block is the
/// payload (earlier blocks and prose become commentary); without fences the
/// whole text must be the payload.
pub fn parse_planner_output(raw_text: &str) -> Result<PlannerResponse, ParseError> {
    let blocks = fenced_blocks(raw_text);
    let (payload, commentary) = match blocks.last() {
        Some(block) => {
            let mut commentary = String::new();
            commentary.push_str(&raw_text[..block.start]);
            commentary.push_str(&raw_text[block.end..]);
            (block.content.trim().to_owned(), commentary.trim().to_owned())
        }
        None => (raw_text.trim().to_owned(), String::new()),
    };
    let envelope: EditsEnvelope = serde_json::from_str(&payload).map_err(|e| {
        ParseError::Malformed {
            message: e.to_string(),
            fragment: fragment_of(&payload),
        }
    })?;
    for edit in &envelope.edits {
        let priority = match edit {
            TreeEdit::Insert { priority, .. } | TreeEdit::Update { priority, .. } => *priority,
            TreeEdit::Prune { .. } => continue,
        };
        if !(0.0..=1.0).contains(&priority) {
            return Err(ParseError::OutOfRange {
                value: priority,
                fragment: fragment_of(&serde_json::to_string(edit).expect("edit serializes")),
            });
        }
    }
    Ok(PlannerResponse {
        edits: envelope.edits,
        commentary,
        raw_exchange: None,
    })
}

fn fragment_of(text: &str) -> String {
    const LIMIT: usize = 160;
    if text.len() <= LIMIT {
        return text.to_owned();
    }
    let mut end = LIMIT;
    while end > 0 && !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}...", &text[..end])
}

struct FencedBlock {
    /// Byte offset of the opening fence line.
    start: usize,
    /// Byte offset just past the closing fence line (or EOF).
    end: usize,
    content: String,
}

fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut open: Option<(usize, String)> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        if line.trim_start().starts_with("```") {
            match open.take() {
                None => open = Some((line_start, String::new())),
                Some((start, content)) => blocks.push(FencedBlock {
                    start,
                    end: offset,
                    content,
                }),
            }
        } else if let Some((_, content)) = &mut open {
            content.push_str(line);
        }
    }
    if let Some((start, content)) = open {
        blocks.push(FencedBlock {
            start,
            end: text.len(),
            content,
        });
    }
    blocks
}
