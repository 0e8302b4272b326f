//! LLM planner: renders the search state into a prompt and parses tree
//! edits out of the reply.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{
    parse_planner_output, render_history, NodeView, Planner, PlannerError, PlannerRequest,
    PlannerResponse, RawExchange, DEFAULT_HISTORY_BYTE_BUDGET,
};
use crate::llm::{ChatClient, ChatMessage, ChatTransport, LlmConfig};
use crate::task::Task;
use crate::tree::NodeStatus;

const SYSTEM_PROMPT: &str = "You are the world model of a program-optimization search. \
You maintain a tree of optimization hypotheses: each node is an intent to transform the \
current best implementation of its parent. Open nodes carry a priority in [0, 1]; closed \
nodes carry the best score their refinement reached; pruned nodes are dead ends.\n\
\n\
You answer with tree edits. Reply with ONE fenced code block containing JSON of the form:\n\
```json\n\
{\"edits\": [\n\
  {\"op\": \"insert\", \"parent\": \"n000000\", \"intent\": \"...\", \"priority\": 0.8},\n\
  {\"op\": \"update\", \"node\": \"n000002\", \"priority\": 0.4, \"rationale\": \"...\"},\n\
  {\"op\": \"prune\", \"node\": \"n000003\", \"rationale\": \"...\"}\n\
]}\n\
```\n\
Rules: priorities must lie in [0, 1]; update only open nodes; never prune the root; \
an empty edits array is a valid answer. Text outside the block is treated as commentary.";

fn default_history_budget() -> usize {
    DEFAULT_HISTORY_BYTE_BUDGET
}

#[derive(Deserialize)]
struct LlmPlannerFile {
    #[serde(flatten)]
    llm: LlmConfig,
    #[serde(default = "default_history_budget")]
    history_byte_budget: usize,
}

pub struct LlmPlanner {
    client: ChatClient,
    history_byte_budget: usize,
    source: PathBuf,
}

impl LlmPlanner {
    pub fn load(path: &Path) -> Result<LlmPlanner, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let file: LlmPlannerFile =
            toml::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))?;
        let client = ChatClient::over_http(file.llm).map_err(|e| e.to_string())?;
        Ok(LlmPlanner {
            client,
            history_byte_budget: file.history_byte_budget,
            source: path.to_owned(),
        })
    }

    pub fn with_transport(config: LlmConfig, transport: Box<dyn ChatTransport>) -> LlmPlanner {
        LlmPlanner {
            client: ChatClient::new(config, transport),
            history_byte_budget: DEFAULT_HISTORY_BYTE_BUDGET,
            source: PathBuf::from("<injected>"),
        }
    }

    fn ask(&self, req: &PlannerRequest, user: String) -> Result<PlannerResponse, PlannerError> {
        let mut messages = vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(user)];
        if let Some(feedback) = &req.retry_feedback {
            messages.push(ChatMessage::user(format!(
                "Your previous reply could not be used: {feedback}\nAnswer again with one \
                 fenced JSON block of edits."
            )));
        }
        let outcome = self
            .client
            .complete(&messages, self.client.config().temperature)
            .map_err(|e| PlannerError::Backend(e.to_string()))?;
        let mut response = parse_planner_output(&outcome.content).map_err(PlannerError::Malformed)?;
        response.raw_exchange = Some(RawExchange {
            request_body: outcome.request_body,
            response_body: outcome.response_body,
        });
        Ok(response)
    }

    fn render_request(&self, req: &PlannerRequest) -> String {
        let mut out = String::new();
        let digest = &req.task_digest;
        out.push_str(&format!("Objective:\n{}\n", digest.objective_text));
        if !digest.instructions.is_empty() {
            out.push_str(&format!("\nConstraints:\n{}\n", digest.instructions));
        }
        out.push_str(&format!(
            "\nBudget remaining: {} evaluations. Current round: {}.\n",
            req.budget_remaining, req.round
        ));
        if let Some(best) = req.best_score {
            out.push_str(&format!("Best score so far: {best:.4} (higher is better, 100 = reference parity).\n"));
        } else {
            out.push_str("No candidate has been evaluated yet.\n");
        }
        out.push_str("\nSearch tree:\n");
        for view in &req.tree_view {
            out.push_str(&render_node(view));
            out.push('\n');
        }
        if !req.history_window.is_empty() {
            out.push_str("\nRecent events:\n");
            out.push_str(&render_history(&req.history_window, self.history_byte_budget));
            out.push('\n');
        }
        if let Some(traj) = &req.last_trajectory {
            out.push_str(&format!(
                "\nJust closed {} (intent {:?}) after {} evaluated samples and {} generation failures.\n",
                traj.node_id, traj.intent, traj.samples_evaluated, traj.generation_failures
            ));
            match &traj.best {
                Some(best) => out.push_str(&format!(
                    "Best candidate {} scored {:.4}{}. Observation excerpt:\n{}\n",
                    best.program_id,
                    best.score,
                    if traj.improved_run_best {
                        " (new run best)"
                    } else {
                        ""
                    },
                    best.observation_excerpt
                )),
                None => out.push_str("No candidate was successfully generated (no evaluation happened).\n"),
            }
        }
        out
    }
}

fn render_node(view: &NodeView) -> String {
    let parent = view
        .parent
        .map(|p| p.to_string())
        .unwrap_or_else(|| "-".to_owned());
    match view.status {
        NodeStatus::Open => format!(
            "{} parent={parent} open priority={:.2} intent={:?}",
            view.id,
            view.priority.unwrap_or(0.0),
            view.intent
        ),
        NodeStatus::Closed => match view.attached_score {
            Some(score) => format!(
                "{} parent={parent} closed score={score:.4} intent={:?}",
                view.id, view.intent
            ),
            None => format!("{} parent={parent} closed score=none intent={:?}", view.id, view.intent),
        },
        NodeStatus::Pruned => format!(
            "{} parent={parent} pruned round={} intent={:?}",
            view.id,
            view.pruned_round.unwrap_or(0),
            view.intent
        ),
    }
}

impl Planner for LlmPlanner {
    fn plan_init(
        &mut self,
        task: &Task,
        req: &PlannerRequest,
    ) -> Result<PlannerResponse, PlannerError> {
        let root = req
            .tree_view
            .iter()
            .find(|v| v.parent.is_none())
            .map(|v| v.id.to_string())
            .unwrap_or_else(|| "n000000".to_owned());
        let user = format!(
            "{}\nReference implementation:\n{}\n\nPropose the initial optimization hypotheses \
             as insert edits under the root node {root}. Order them by how promising they are \
             and encode that in the priorities.",
            self.render_request(req),
            task.reference_impl,
        );
        self.ask(req, user)
    }

    fn plan_evolve(&mut self, req: &PlannerRequest) -> Result<PlannerResponse, PlannerError> {
        let user = format!(
            "{}\nUpdate the tree in light of this trajectory: insert follow-up hypotheses, \
             re-prioritize open nodes, and prune dead ends.",
            self.render_request(req)
        );
        self.ask(req, user)
    }

    fn plan_recovery(&mut self, req: &PlannerRequest) -> Result<PlannerResponse, PlannerError> {
        let user = format!(
            "{}\nThe frontier is empty but budget remains. Propose at least one new hypothesis \
             (insert under any non-pruned node), or answer with an empty edits array to end \
             the run.",
            self.render_request(req)
        );
        self.ask(req, user)
    }

    fn plan_correction(&mut self, req: &PlannerRequest) -> Result<PlannerResponse, PlannerError> {
        let mut rejected = String::new();
        for r in &req.rejected {
            rejected.push_str(&format!(
                "- {}: {}\n",
                serde_json::to_string(&r.edit).expect("edit serializes"),
                r.reason
            ));
        }
        let user = format!(
            "{}\nThese edits were rejected:\n{rejected}\nAnswer with corrected replacements \
             for only these edits, or an empty edits array to withdraw them.",
            self.render_request(req)
        );
        self.ask(req, user)
    }

    fn describe(&self) -> String {
        format!("llm:{}", self.source.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::HttpResponse;
    use crate::planner::{tree_view, PlanPhase, TaskDigest};
    use crate::testutil::demo_task;
    use crate::tree::{SearchState, TreeEdit};
    use std::sync::{Arc, Mutex};

    #[derive(Clone)]
    struct ScriptedTransport {
        replies: Arc<Mutex<Vec<String>>>,
        requests: Arc<Mutex<Vec<String>>>,
    }

    impl ScriptedTransport {
        fn new(replies: Vec<&str>) -> Self {
            ScriptedTransport {
                replies: Arc::new(Mutex::new(replies.into_iter().map(str::to_owned).collect())),
                requests: Arc::new(Mutex::new(Vec::new())),
            }
        }

        fn sent(&self) -> String {
            self.requests.lock().unwrap().join("")
        }
    }

    impl ChatTransport for ScriptedTransport {
        fn post_chat(
            &self,
            _config: &LlmConfig,
            _api_key: &str,
            body: &str,
        ) -> Result<HttpResponse, String> {
            self.requests.lock().unwrap().push(body.to_owned());
            let content = self.replies.lock().unwrap().remove(0);
            Ok(HttpResponse {
                status: 200,
                body: serde_json::json!({
                    "choices": [{"message": {"role": "assistant", "content": content}}]
                })
                .to_string(),
            })
        }
    }

    fn test_config() -> LlmConfig {
        std::env::set_var("LLM_PLANNER_TEST_KEY", "k");
        LlmConfig {
            base_url: "http://unused".to_owned(),
            model: "m".to_owned(),
            api_key_env: "LLM_PLANNER_TEST_KEY".to_owned(),
            temperature: 0.2,
            max_tokens: None,
            timeout_s: 5.0,
            retries: 0,
        }
    }

    fn planner_with_replies(replies: Vec<&str>) -> LlmPlanner {
        LlmPlanner::with_transport(test_config(), Box::new(ScriptedTransport::new(replies)))
    }

    fn request_for(state: &SearchState, phase: PlanPhase) -> PlannerRequest {
        PlannerRequest {
            phase,
            task_digest: TaskDigest::of(&demo_task()),
            tree_view: tree_view(state),
            last_trajectory: None,
            history_window: vec![],
            best_score: None,
            budget_remaining: 40,
            round: 0,
            rejected: vec![],
            retry_feedback: None,
        }
    }

    #[test]
    fn init_round_trips_edits_and_exchange() {
        let mut p = planner_with_replies(vec![
            "Let us explore tiling first.\n```json\n{\"edits\": [{\"op\": \"insert\", \
             \"parent\": \"n000000\", \"intent\": \"add tile_a\", \"priority\": 0.9}]}\n```",
        ]);
        let state = SearchState::new("obj", 40);
        let resp = p
            .plan_init(&demo_task(), &request_for(&state, PlanPhase::Init))
            .unwrap();
        assert_eq!(resp.edits.len(), 1);
        assert!(matches!(&resp.edits[0], TreeEdit::Insert { .. }));
        assert_eq!(resp.commentary, "Let us explore tiling first.");
        assert!(resp.raw_exchange.is_some());
    }

    #[test]
    fn malformed_reply_is_malformed_error() {
        let mut p = planner_with_replies(vec!["no edits here, just prose"]);
        let state = SearchState::new("obj", 40);
        let err = p
            .plan_evolve(&request_for(&state, PlanPhase::Evolve))
            .unwrap_err();
        assert!(matches!(err, PlannerError::Malformed(_)));
    }

    #[test]
    fn prompt_contains_tree_and_feedback() {
        let transport = ScriptedTransport::new(vec!["```json\n{\"edits\": []}\n```"]);
        let mut p =
            LlmPlanner::with_transport(test_config(), Box::new(transport.clone()));
        let mut state = SearchState::new("obj", 40);
        state.insert_open(state.root_id, "add tile_a", 0.9);
        let mut req = request_for(&state, PlanPhase::Evolve);
        req.retry_feedback = Some("priority 1.3 out of range".to_owned());
        p.plan_evolve(&req).unwrap();
        let sent = transport.sent();
        assert!(sent.contains("add tile_a"), "tree rendered into prompt");
        assert!(sent.contains("priority 1.3 out of range"), "retry feedback forwarded");
    }
}
