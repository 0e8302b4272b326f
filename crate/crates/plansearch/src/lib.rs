//! Budgeted search over program-optimization candidates.
//!
//! The engine maintains an explicit tree of optimization hypotheses, selects
//! the most promising open node, refines it with stochastic code generation
//! until progress stalls, and lets a planner rewrite the tree after each
//! closure. All decisions are recorded in an append-only trace that supports
//! exact resume.

pub mod baseline;
pub mod coder;
pub mod engine;
pub mod eval;
pub mod llm;
pub mod planner;
pub mod report;
pub mod rundir;
pub mod score;
pub mod task;
pub mod text;
pub mod trace;
pub mod tree;

#[cfg(test)]
pub(crate) mod testutil;

pub use tree::{
    ActionNode, EditError, EditOutcome, NodeId, NodeStatus, Observation, PriorityEntry, Program,
    ProgramId, ProgramOrigin, SearchState, SelectError, TreeEdit, WorkloadResult, WorkloadStatus,
};
