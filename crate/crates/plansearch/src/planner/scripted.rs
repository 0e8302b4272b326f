//! Deterministic rule-table planner over a synthetic-landscape vocabulary.
//!
//! A test and offline backend, not a contribution: it proposes
//! single-directive extensions of the node that just closed, rewards the
//! children of improving nodes, downgrades their open siblings, and prunes
//! closures that trail the run best by a configured margin. All decisions
//! are pure functions of the request, so traces are byte-identical across
//! runs.
//!
//! Rule file format (TOML):
//!
//! ```toml
//! landscape = "landscape.toml"   # vocabulary + prerequisites, relative path
//!
//! [priorities]                   # initial priority per directive, in [0,1]
//! tile_a = 0.9
//!
//! [rules]
//! sibling_decay = 0.3            # subtracted from open siblings on improvement
//! child_bonus = 0.15             # added to extensions of an improving node
//! stall_penalty = 0.1            # subtracted from extensions otherwise
//! prune_margin = 30.0            # close-score gap to run best that prunes
//! ```
//!
//! Node intents follow the convention `add <directive>`; a node's directive
//! set is the union of such intents along its ancestry.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{
    NodeView, PlanPhase, Planner, PlannerError, PlannerRequest, PlannerResponse,
};
use crate::eval::landscape::Landscape;
use crate::task::Task;
use crate::tree::{NodeId, NodeStatus, TreeEdit};

#[derive(Debug, Clone, Deserialize)]
pub struct RuleSet {
    pub sibling_decay: f64,
    pub child_bonus: f64,
    pub stall_penalty: f64,
    pub prune_margin: f64,
}

#[derive(Deserialize)]
struct RuleFile {
    landscape: PathBuf,
    priorities: BTreeMap<String, f64>,
    rules: RuleSet,
}

pub struct ScriptedPlanner {
    landscape: Landscape,
    priorities: BTreeMap<String, f64>,
    rules: RuleSet,
    source: PathBuf,
}

impl ScriptedPlanner {
    pub fn load(path: &Path) -> Result<ScriptedPlanner, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let file: RuleFile =
            toml::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let landscape_path = if file.landscape.is_absolute() {
            file.landscape.clone()
        } else {
            dir.join(&file.landscape)
        };
        let landscape = Landscape::load(&landscape_path).map_err(|e| e.to_string())?;
        Self::new(landscape, file.priorities, file.rules).map(|mut p| {
            p.source = path.to_owned();
            p
        })
    }

    pub fn new(
        landscape: Landscape,
        priorities: BTreeMap<String, f64>,
        rules: RuleSet,
    ) -> Result<ScriptedPlanner, String> {
        for d in &landscape.directives {
            let p = priorities
                .get(&d.name)
                .ok_or_else(|| format!("no priority for directive {:?}", d.name))?;
            if !(0.0..=1.0).contains(p) {
                return Err(format!("priority for {:?} out of range", d.name));
            }
        }
        Ok(ScriptedPlanner {
            landscape,
            priorities,
            rules,
            source: PathBuf::new(),
        })
    }

    fn root_of(views: &[NodeView]) -> Result<NodeId, PlannerError> {
        views
            .iter()
            .find(|v| v.parent.is_none())
            .map(|v| v.id)
            .ok_or_else(|| PlannerError::Backend("tree view has no root".to_owned()))
    }

    /// Union of `add <directive>` intents from the node up to the root.
    fn directives_of(by_id: &BTreeMap<NodeId, &NodeView>, id: NodeId) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        let mut cursor = Some(id);
        while let Some(node_id) = cursor {
            let Some(view) = by_id.get(&node_id) else { break };
            if let Some(name) = view.intent.strip_prefix("add ") {
                set.insert(name.to_owned());
            }
            cursor = view.parent;
        }
        set
    }

    /// Directive sets already represented by any node, whatever its status.
    fn known_sets(by_id: &BTreeMap<NodeId, &NodeView>) -> BTreeSet<BTreeSet<String>> {
        by_id
            .keys()
            .map(|id| Self::directives_of(by_id, *id))
            .collect()
    }

    /// Single-directive extensions of `base` that are prerequisite-valid
    /// and not yet represented in the tree, in vocabulary order.
    fn eligible_extensions(
        &self,
        base: &BTreeSet<String>,
        known: &BTreeSet<BTreeSet<String>>,
    ) -> Vec<String> {
        self.landscape
            .directives
            .iter()
            .filter(|d| !base.contains(&d.name))
            .filter(|d| d.requires.iter().all(|r| base.contains(r)))
            .filter(|d| {
                let mut extended = base.clone();
                extended.insert(d.name.clone());
                !known.contains(&extended)
            })
            .map(|d| d.name.clone())
            .collect()
    }
}

fn clamp01(p: f64) -> f64 {
    p.clamp(0.0, 1.0)
}

impl Planner for ScriptedPlanner {
    fn plan_init(
        &mut self,
        _task: &Task,
        req: &PlannerRequest,
    ) -> Result<PlannerResponse, PlannerError> {
        let root = Self::root_of(&req.tree_view)?;
        let edits = self
            .landscape
            .directives
            .iter()
            .map(|d| TreeEdit::Insert {
                parent: root,
                intent: format!("add {}", d.name),
                priority: self.priorities[&d.name],
            })
            .collect();
        Ok(PlannerResponse {
            edits,
            commentary: String::new(),
            raw_exchange: None,
        })
    }

    fn plan_evolve(&mut self, req: &PlannerRequest) -> Result<PlannerResponse, PlannerError> {
        debug_assert_eq!(req.phase, PlanPhase::Evolve);
        let Some(traj) = &req.last_trajectory else {
            return Ok(PlannerResponse {
                edits: Vec::new(),
                commentary: String::new(),
                raw_exchange: None,
            });
        };
        let by_id: BTreeMap<NodeId, &NodeView> =
            req.tree_view.iter().map(|v| (v.id, v)).collect();
        let closed_score = traj.best.as_ref().map(|b| b.score);

        // A closure far behind the run best is a dead end: prune it and
        // propose nothing beneath it.
        if let Some(best) = req.best_score {
            let gap = best - closed_score.unwrap_or(f64::NEG_INFINITY);
            if gap > self.rules.prune_margin {
                let rationale = match closed_score {
                    Some(s) => format!(
                        "score {s:.4} trails best {best:.4} beyond margin {:.1}",
                        self.rules.prune_margin
                    ),
                    None => format!("no candidate produced while best is {best:.4}"),
                };
                return Ok(PlannerResponse {
                    edits: vec![TreeEdit::Prune {
                        node: traj.node_id,
                        rationale,
                    }],
                    commentary: String::new(),
                    raw_exchange: None,
                });
            }
        }

        let mut edits = Vec::new();
        if traj.improved_run_best {
            let score = closed_score.expect("improvement implies a candidate");
            let parent = by_id
                .get(&traj.node_id)
                .and_then(|v| v.parent);
            for view in &req.tree_view {
                if view.status == NodeStatus::Open
                    && view.parent == parent
                    && view.id != traj.node_id
                {
                    let current = view.priority.expect("open nodes carry a priority");
                    edits.push(TreeEdit::Update {
                        node: view.id,
                        priority: clamp01(current - self.rules.sibling_decay),
                        rationale: format!("sibling {:?} scored {score:.4}", traj.intent),
                    });
                }
            }
        }

        let base = Self::directives_of(&by_id, traj.node_id);
        let known = Self::known_sets(&by_id);
        let modifier = if traj.improved_run_best {
            self.rules.child_bonus
        } else {
            -self.rules.stall_penalty
        };
        for name in self.eligible_extensions(&base, &known) {
            edits.push(TreeEdit::Insert {
                parent: traj.node_id,
                intent: format!("add {name}"),
                priority: clamp01(self.priorities[&name] + modifier),
            });
        }
        Ok(PlannerResponse {
            edits,
            commentary: String::new(),
            raw_exchange: None,
        })
    }

    fn plan_recovery(&mut self, req: &PlannerRequest) -> Result<PlannerResponse, PlannerError> {
        let by_id: BTreeMap<NodeId, &NodeView> =
            req.tree_view.iter().map(|v| (v.id, v)).collect();
        let known = Self::known_sets(&by_id);
        for view in &req.tree_view {
            if view.status != NodeStatus::Closed {
                continue;
            }
            let base = Self::directives_of(&by_id, view.id);
            if let Some(name) = self.eligible_extensions(&base, &known).first() {
                return Ok(PlannerResponse {
                    edits: vec![TreeEdit::Insert {
                        parent: view.id,
                        intent: format!("add {name}"),
                        priority: self.priorities[name],
                    }],
                    commentary: String::new(),
                    raw_exchange: None,
                });
            }
        }
        Ok(PlannerResponse {
            edits: Vec::new(),
            commentary: String::new(),
            raw_exchange: None,
        })
    }

    fn plan_correction(&mut self, _req: &PlannerRequest) -> Result<PlannerResponse, PlannerError> {
        // Rule-table edits are valid by construction; anything rejected is
        // simply withdrawn.
        Ok(PlannerResponse {
            edits: Vec::new(),
            commentary: String::new(),
            raw_exchange: None,
        })
    }

    fn describe(&self) -> String {
        format!("scripted:{}", self.source.display())
    }
}
