//! Search-tree domain model: programs, observations, action nodes, and the
//! tree state machine with its edit operations.
//!
//! Every other module operates through the types defined here. The tree is
//! mutated only by [`SearchState::apply_edit`] and
//! [`SearchState::record_closure`]; the open-node frontier is maintained as
//! an index and must always equal the set of nodes with `Open` status.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of an action node. Allocated sequentially; never reused.
///
/// Displays as `n000042` so that lexicographic order matches allocation
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

/// Identifier of a candidate program. Allocated sequentially; never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProgramId(pub u64);

macro_rules! string_id {
    ($ty:ident, $prefix:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{:06}"), self.0)
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let digits = s
                    .strip_prefix($prefix)
                    .ok_or_else(|| format!("invalid id {s:?}: expected {} prefix", $prefix))?;
                let n: u64 = digits
                    .parse()
                    .map_err(|_| format!("invalid id {s:?}: non-numeric suffix"))?;
                Ok($ty(n))
            }
        }

        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
                ser.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
                let s = String::deserialize(de)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_id!(NodeId, "n");
string_id!(ProgramId, "p");

/// How a candidate program came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProgramOrigin {
    PlannerSeeded,
    RefinementSample,
    BaselineMutation,
}

/// A candidate implementation: a bundle of named source files plus lineage.
///
/// `round` is the evaluation round that consumed a budget unit for this
/// program; rounds are unique across a run (one evaluation per round).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub id: ProgramId,
    /// File name -> source text. Non-empty; names unique by construction.
    pub files: BTreeMap<String, String>,
    /// The action node whose instantiation produced this program.
    pub parent_action_id: NodeId,
    pub round: u32,
    pub created_from: ProgramOrigin,
}

/// Per-workload outcome of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadStatus {
    Pass,
    WrongAnswer,
    CompileError,
    RuntimeError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadResult {
    pub workload_id: String,
    pub status: WorkloadStatus,
    /// Present iff `status == Pass`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_us: Option<f64>,
    #[serde(default)]
    pub log_excerpt: String,
}

impl WorkloadResult {
    pub fn passed(workload_id: impl Into<String>, latency_us: f64, log_excerpt: String) -> Self {
        WorkloadResult {
            workload_id: workload_id.into(),
            status: WorkloadStatus::Pass,
            latency_us: Some(latency_us),
            log_excerpt,
        }
    }

    pub fn failed(
        workload_id: impl Into<String>,
        status: WorkloadStatus,
        log_excerpt: String,
    ) -> Self {
        debug_assert!(status != WorkloadStatus::Pass);
        WorkloadResult {
            workload_id: workload_id.into(),
            status,
            latency_us: None,
            log_excerpt,
        }
    }
}

/// The evaluator's observation tuple: correctness flag, per-workload
/// results (one per declared workload, task order), and diagnostic
/// metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub correct: bool,
    pub workload_results: Vec<WorkloadResult>,
    pub metadata: String,
}

impl Observation {
    /// Builds an observation; `correct` is derived (true iff every
    /// workload passed), never supplied by the caller.
    pub fn new(workload_results: Vec<WorkloadResult>, metadata: String) -> Self {
        let correct = !workload_results.is_empty()
            && workload_results
                .iter()
                .all(|w| w.status == WorkloadStatus::Pass);
        Observation {
            correct,
            workload_results,
            metadata,
        }
    }
}

/// Node lifecycle. Transitions only along open -> closed, open -> pruned,
/// closed -> pruned; never back to open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Open,
    Closed,
    Pruned,
}

/// One entry in a node's priority timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityEntry {
    pub round: u32,
    pub value: f64,
    pub rationale: String,
}

/// A node of the search tree: an optimization hypothesis (intent) attached
/// to a parent, either pending (open, with a priority) or visited (closed,
/// with the refinement's best program attached).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionNode {
    pub id: NodeId,
    /// Absent only for the root.
    pub parent: Option<NodeId>,
    pub intent: String,
    pub status: NodeStatus,
    /// In `[0, 1]`; meaningful while open.
    pub priority: f64,
    pub priority_history: Vec<PriorityEntry>,
    pub inserted_round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached_program_id: Option<ProgramId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_rationale: Option<String>,
    pub children: Vec<NodeId>,
}

/// The planner's state-transition vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TreeEdit {
    /// Add a new open hypothesis under `parent` (open or closed, not pruned).
    Insert {
        parent: NodeId,
        intent: String,
        priority: f64,
    },
    /// Re-estimate the priority of an open node.
    Update {
        node: NodeId,
        priority: f64,
        rationale: String,
    },
    /// Mark a non-root node and its entire subtree pruned. History is
    /// retained; pruned nodes only stop being selectable.
    Prune { node: NodeId, rationale: String },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EditError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("illegal target: {0}")]
    IllegalTarget(String),
    #[error("priority {0} out of range [0, 1]")]
    OutOfRange(f64),
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("frontier is empty")]
    EmptyFrontier,
}

/// What an applied edit did, for trace annotation.
#[derive(Debug, Clone, PartialEq)]
pub enum EditOutcome {
    Inserted(NodeId),
    Updated,
    /// All node ids marked pruned, target first.
    Pruned(Vec<NodeId>),
}

/// The search state: the hypothesis tree plus the frontier index, round
/// counter, and remaining budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub nodes: BTreeMap<NodeId, ActionNode>,
    pub root_id: NodeId,
    /// Index over nodes with `Open` status. Kept exact after every mutation.
    pub frontier: BTreeSet<NodeId>,
    /// Evaluation rounds consumed so far.
    pub round: u32,
    pub budget_remaining: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_program_id: Option<ProgramId>,
    /// `None` until the first evaluation; treated as negative infinity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_score: Option<f64>,
    next_node_id: u64,
    next_program_id: u64,
}

impl SearchState {
    /// Creates a state anchored by a synthetic root node. The root carries
    /// the task objective as its intent, is never selectable, and may hold
    /// an initial seed program for its children to refine.
    pub fn new(objective: impl Into<String>, budget: u32) -> SearchState {
        let root_id = NodeId(0);
        let root = ActionNode {
            id: root_id,
            parent: None,
            intent: objective.into(),
            status: NodeStatus::Closed,
            priority: 0.0,
            priority_history: Vec::new(),
            inserted_round: 0,
            attached_program_id: None,
            attached_score: None,
            pruned_round: None,
            pruned_rationale: None,
            children: Vec::new(),
        };
        let mut nodes = BTreeMap::new();
        nodes.insert(root_id, root);
        SearchState {
            nodes,
            root_id,
            frontier: BTreeSet::new(),
            round: 0,
            budget_remaining: budget,
            best_program_id: None,
            best_score: None,
            next_node_id: 1,
            next_program_id: 1,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&ActionNode> {
        self.nodes.get(&id)
    }

    /// Best aggregate score so far, negative infinity before any evaluation.
    pub fn best_score_or_neg_inf(&self) -> f64 {
        self.best_score.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn alloc_program_id(&mut self) -> ProgramId {
        let id = ProgramId(self.next_program_id);
        self.next_program_id += 1;
        id
    }

    /// Applies one tree edit at the given round.
    ///
    /// On failure the state is unchanged and the error message is suitable
    /// for verbatim return to the planner.
    pub fn apply_edit(&mut self, edit: &TreeEdit, round: u32) -> Result<EditOutcome, EditError> {
        let outcome = match edit {
            TreeEdit::Insert {
                parent,
                intent,
                priority,
            } => {
                check_priority(*priority)?;
                let parent_node = self
                    .nodes
                    .get(parent)
                    .ok_or(EditError::UnknownNode(*parent))?;
                if parent_node.status == NodeStatus::Pruned {
                    return Err(EditError::IllegalTarget(format!(
                        "insert under pruned node {parent}"
                    )));
                }
                let id = NodeId(self.next_node_id);
                self.next_node_id += 1;
                let node = ActionNode {
                    id,
                    parent: Some(*parent),
                    intent: intent.clone(),
                    status: NodeStatus::Open,
                    priority: *priority,
                    priority_history: vec![PriorityEntry {
                        round,
                        value: *priority,
                        rationale: "initial".to_owned(),
                    }],
                    inserted_round: round,
                    attached_program_id: None,
                    attached_score: None,
                    pruned_round: None,
                    pruned_rationale: None,
                    children: Vec::new(),
                };
                self.nodes.insert(id, node);
                self.nodes
                    .get_mut(parent)
                    .expect("parent checked above")
                    .children
                    .push(id);
                self.frontier.insert(id);
                EditOutcome::Inserted(id)
            }
            TreeEdit::Update {
                node,
                priority,
                rationale,
            } => {
                check_priority(*priority)?;
                let n = self.nodes.get_mut(node).ok_or(EditError::UnknownNode(*node))?;
                if n.status != NodeStatus::Open {
                    return Err(EditError::IllegalTarget(format!(
                        "update of non-open node {node} (status {:?})",
                        n.status
                    )));
                }
                n.priority = *priority;
                n.priority_history.push(PriorityEntry {
                    round,
                    value: *priority,
                    rationale: rationale.clone(),
                });
                EditOutcome::Updated
            }
            TreeEdit::Prune { node, rationale } => {
                let n = self.nodes.get(node).ok_or(EditError::UnknownNode(*node))?;
                if *node == self.root_id {
                    return Err(EditError::IllegalTarget("prune of root".to_owned()));
                }
                if n.status == NodeStatus::Pruned {
                    return Err(EditError::IllegalTarget(format!(
                        "prune of already-pruned node {node}"
                    )));
                }
                let pruned = self.prune_subtree(*node, round);
                self.nodes
                    .get_mut(node)
                    .expect("target checked above")
                    .pruned_rationale = Some(rationale.clone());
                EditOutcome::Pruned(pruned)
            }
        };
        debug_assert!(self.frontier_is_consistent());
        Ok(outcome)
    }

    fn prune_subtree(&mut self, target: NodeId, round: u32) -> Vec<NodeId> {
        let mut pruned = Vec::new();
        let mut stack = vec![target];
        while let Some(id) = stack.pop() {
            let node = self.nodes.get_mut(&id).expect("child links are valid");
            stack.extend(node.children.iter().copied());
            if node.status != NodeStatus::Pruned {
                node.status = NodeStatus::Pruned;
                node.pruned_round = Some(round);
                self.frontier.remove(&id);
                pruned.push(id);
            }
        }
        pruned
    }

    /// Picks the open node with the highest priority. Ties break toward
    /// the earliest insertion round, then the smallest node id, so
    /// selection is deterministic.
    pub fn select_action(&self) -> Result<NodeId, SelectError> {
        self.frontier
            .iter()
            .map(|id| &self.nodes[id])
            .max_by(|a, b| {
                a.priority
                    .partial_cmp(&b.priority)
                    .expect("priorities are validated finite")
                    // later insertion / larger id lose the max
                    .then(b.inserted_round.cmp(&a.inserted_round))
                    .then(b.id.cmp(&a.id))
            })
            .map(|n| n.id)
            .ok_or(SelectError::EmptyFrontier)
    }

    /// Closes a node after its refinement concluded, attaching the best
    /// evaluated candidate if there was one, and folds the score into the
    /// run-level best.
    pub fn record_closure(
        &mut self,
        node_id: NodeId,
        best_program_id: Option<ProgramId>,
        best_score: Option<f64>,
    ) -> Result<(), EditError> {
        let node = self
            .nodes
            .get_mut(&node_id)
            .ok_or(EditError::UnknownNode(node_id))?;
        if node.status != NodeStatus::Open {
            return Err(EditError::IllegalTarget(format!(
                "closure of non-open node {node_id} (status {:?})",
                node.status
            )));
        }
        node.status = NodeStatus::Closed;
        node.attached_program_id = best_program_id;
        node.attached_score = best_score;
        self.frontier.remove(&node_id);
        if let (Some(pid), Some(score)) = (best_program_id, best_score) {
            self.note_evaluated_score(pid, score);
        }
        debug_assert!(self.frontier_is_consistent());
        Ok(())
    }

    /// Folds one evaluated candidate's aggregate score into the run best.
    pub fn note_evaluated_score(&mut self, program_id: ProgramId, score: f64) {
        if score > self.best_score_or_neg_inf() {
            self.best_score = Some(score);
            self.best_program_id = Some(program_id);
        }
    }

    /// Walks up from `node_id` (inclusive) to the root and returns the
    /// first attached program id found: the `x_parent` a new sample builds
    /// on.
    pub fn nearest_attached_program(&self, node_id: NodeId) -> Option<ProgramId> {
        let mut cursor = Some(node_id);
        while let Some(id) = cursor {
            let node = self.nodes.get(&id)?;
            if let Some(pid) = node.attached_program_id {
                return Some(pid);
            }
            cursor = node.parent;
        }
        None
    }

    /// Re-derives the frontier from node statuses. The maintained index
    /// must always equal this.
    pub fn derived_frontier(&self) -> BTreeSet<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.status == NodeStatus::Open)
            .map(|n| n.id)
            .collect()
    }

    pub fn frontier_is_consistent(&self) -> bool {
        self.frontier == self.derived_frontier()
    }

    /// Structural checks: exact frontier index, valid parent links, acyclic
    /// reachability from the root, monotone priority history.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.frontier_is_consistent() {
            return Err("frontier index diverged from node statuses".to_owned());
        }
        let mut reachable = BTreeSet::new();
        let mut stack = vec![self.root_id];
        while let Some(id) = stack.pop() {
            if !reachable.insert(id) {
                return Err(format!("cycle detected at {id}"));
            }
            let node = self
                .nodes
                .get(&id)
                .ok_or_else(|| format!("dangling child link {id}"))?;
            for child in &node.children {
                let c = self
                    .nodes
                    .get(child)
                    .ok_or_else(|| format!("dangling child link {child}"))?;
                if c.parent != Some(id) {
                    return Err(format!("child {child} does not point back to {id}"));
                }
                stack.push(*child);
            }
        }
        if reachable.len() != self.nodes.len() {
            return Err("unreachable nodes present".to_owned());
        }
        for node in self.nodes.values() {
            if node.id != self.root_id && node.parent.is_none() {
                return Err(format!("non-root node {} has no parent", node.id));
            }
            if !(0.0..=1.0).contains(&node.priority) {
                return Err(format!("node {} priority out of range", node.id));
            }
            let mut last_round = 0;
            for entry in &node.priority_history {
                if entry.round < last_round {
                    return Err(format!("node {} priority history not monotone", node.id));
                }
                last_round = entry.round;
            }
        }
        Ok(())
    }
}

fn check_priority(p: f64) -> Result<(), EditError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(EditError::OutOfRange(p))
    }
}

#[cfg(test)]
impl SearchState {
    /// Test helper: insert under `parent` at the current round, panicking
    /// on rejection.
    pub(crate) fn insert_open(&mut self, parent: NodeId, intent: &str, priority: f64) -> NodeId {
        let round = self.round;
        match self
            .apply_edit(
                &TreeEdit::Insert {
                    parent,
                    intent: intent.to_owned(),
                    priority,
                },
                round,
            )
            .unwrap()
        {
            EditOutcome::Inserted(id) => id,
            other => panic!("expected insert outcome, got {other:?}"),
        }
    }
}
