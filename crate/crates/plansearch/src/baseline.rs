//! Evolutionary comparator: heuristic search directly in program space.
//!
//! Keeps a capacity-bounded archive of the best programs, samples parents
//! score-proportionally (with a uniform exploration floor), and asks a
//! mutation policy for one new candidate per step. Shares the evaluator,
//! scoring, budget accounting, and trace format with the engine so the two
//! are comparable run-for-run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coder::{scan_file_tags, validate_manifest, CoderError, GeneratedProgram};
use crate::engine::{observation_excerpt, EngineError, RunResult};
use crate::eval::{EvalContext, EvalError, Evaluator};
use crate::llm::{ChatClient, ChatMessage, LlmConfig};
use crate::planner::{RawExchange, TaskDigest};
use crate::score::score;
use crate::task::Task;
use crate::trace::{BestRef, ExitStatus, RunConfigRecord, RunMode, TraceEvent, TraceWriter};
use crate::tree::{NodeId, Program, ProgramId, ProgramOrigin};

/// Baseline events carry this placeholder in node-id positions: there is no
/// tree, only the archive.
pub const BASELINE_NODE: NodeId = NodeId(0);

/// Safety valve: consecutive unusable generations before the run aborts.
/// The engine bounds this per node via its stagnation rule; the baseline
/// has no such rule, so an explicit cap keeps the loop finite.
const MAX_CONSECUTIVE_GENERATION_FAILURES: u32 = 32;

fn default_capacity() -> usize {
    16
}
fn default_parents() -> usize {
    2
}
fn default_epsilon() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Total evaluator invocations allowed; same unit as the engine's.
    pub budget: u32,
    #[serde(default = "default_capacity")]
    pub archive_capacity: usize,
    /// Parents sampled (with replacement) for each mutation prompt.
    #[serde(default = "default_parents")]
    pub parents_per_step: usize,
    /// Probability of drawing a parent uniformly instead of by score.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            budget: 120,
            archive_capacity: default_capacity(),
            parents_per_step: default_parents(),
            epsilon: default_epsilon(),
            rng_seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.budget < 1 {
            return Err("budget must be at least 1".to_owned());
        }
        if self.archive_capacity < 1 {
            return Err("archive capacity must be at least 1".to_owned());
        }
        if self.parents_per_step < 1 {
            return Err("parents per step must be at least 1".to_owned());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err("epsilon must lie in [0, 1]".to_owned());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub program_id: ProgramId,
    pub score: f64,
    pub observation_excerpt: String,
}

/// Outcome of one insertion attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InsertOutcome {
    pub inserted: bool,
    pub evicted: Option<ProgramId>,
}

/// Best-programs archive: sorted by score descending (ties broken toward
/// the earlier program), never longer than its capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    entries: Vec<ArchiveEntry>,
    capacity: usize,
}

impl Archive {
    pub fn new(capacity: usize) -> Archive {
        assert!(capacity >= 1, "archive capacity must be at least 1");
        Archive {
            entries: Vec::new(),
            capacity,
        }
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn rank(e: &ArchiveEntry) -> (std::cmp::Reverse<OrderedScore>, ProgramId) {
        (std::cmp::Reverse(OrderedScore(e.score)), e.program_id)
    }

    /// Inserts one evaluated candidate. Incorrect programs (score 0) enter
    /// only while the archive is not full; when insertion overflows the
    /// capacity, the worst entry (which may be the new one) is dropped.
    pub fn insert(&mut self, entry: ArchiveEntry) -> InsertOutcome {
        if entry.score == 0.0 && self.entries.len() >= self.capacity {
            return InsertOutcome {
                inserted: false,
                evicted: None,
            };
        }
        let new_id = entry.program_id;
        let at = self
            .entries
            .binary_search_by_key(&Self::rank(&entry), Self::rank)
            .unwrap_or_else(|i| i);
        self.entries.insert(at, entry);
        let mut outcome = InsertOutcome {
            inserted: true,
            evicted: None,
        };
        if self.entries.len() > self.capacity {
            let dropped = self.entries.pop().expect("overfull archive pops");
            if dropped.program_id == new_id {
                outcome.inserted = false;
            } else {
                outcome.evicted = Some(dropped.program_id);
            }
        }
        debug_assert!(self.check_ordering().is_ok());
        outcome
    }

    pub fn check_ordering(&self) -> Result<(), String> {
        if self.entries.len() > self.capacity {
            return Err(format!(
                "archive holds {} entries, capacity {}",
                self.entries.len(),
                self.capacity
            ));
        }
        for pair in self.entries.windows(2) {
            if Self::rank(&pair[0]) > Self::rank(&pair[1]) {
                return Err(format!(
                    "archive out of order: {} ({}) before {} ({})",
                    pair[0].program_id, pair[0].score, pair[1].program_id, pair[1].score
                ));
            }
        }
        Ok(())
    }

    /// Draws one parent: with probability epsilon uniformly, otherwise
    /// proportional to score (uniform again when all scores are zero).
    fn sample_one(&self, rng: &mut ChaCha8Rng, epsilon: f64) -> &ArchiveEntry {
        assert!(!self.entries.is_empty(), "sampling from an empty archive");
        if rng.random::<f64>() < epsilon {
            return &self.entries[rng.random_range(0..self.entries.len())];
        }
        let total: f64 = self.entries.iter().map(|e| e.score).sum();
        if total <= 0.0 {
            return &self.entries[rng.random_range(0..self.entries.len())];
        }
        let mut point = rng.random::<f64>() * total;
        for entry in &self.entries {
            point -= entry.score;
            if point <= 0.0 {
                return entry;
            }
        }
        self.entries.last().expect("nonempty")
    }
}

/// Total order on scores for archive ranking. Scores are aggregates of
/// finite inputs; NaN would be an evaluator bug and ranks below everything.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedScore(f64);

impl Eq for OrderedScore {}

impl PartialOrd for OrderedScore {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedScore {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .partial_cmp(&other.0)
            .unwrap_or_else(|| other.0.is_nan().cmp(&self.0.is_nan()))
    }
}

/// One sampled parent with the context the mutation prompt serializes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParentContext {
    pub program: Program,
    pub score: f64,
    pub observation_excerpt: String,
}

/// Everything one mutation call conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct MutationRequest {
    pub task_digest: TaskDigest,
    /// Sampled parents, best first; empty while the archive is empty.
    pub parents: Vec<ParentContext>,
    /// Task-provided starting implementation, for the bootstrap step.
    pub initial_files: Option<BTreeMap<String, String>>,
    pub step: u32,
    pub new_program_id: ProgramId,
    pub round: u32,
}

/// Mutation policy over raw programs; the baseline's coder analogue. The
/// multi-parent prompt does not fit the coder's single-parent request, so
/// this is its own trait.
pub trait ProgramMutator {
    fn mutate(&mut self, req: &MutationRequest) -> Result<GeneratedProgram, CoderError>;

    /// Short spec string recorded in traces.
    fn describe(&self) -> String;
}

/// Runs the evolutionary baseline, writing its trace into the writer's run
/// directory. Budget accounting matches the engine: one evaluator call per
/// budget unit, generation failures free.
pub fn run_baseline(
    task: &Task,
    config: BaselineConfig,
    mutator: &mut dyn ProgramMutator,
    evaluator: &mut dyn Evaluator,
    trace: &mut TraceWriter,
) -> Result<RunResult, EngineError> {
    config.validate().map_err(EngineError::Config)?;
    let record = RunConfigRecord {
        mode: RunMode::Baseline,
        engine: None,
        baseline: Some(config),
        planner: None,
        coder: None,
        mutator: Some(mutator.describe()),
        evaluator: evaluator.describe(),
        clock: trace.clock_mode(),
    };
    let digest = TaskDigest::of(task);
    let work_root = trace.run_dir().join("work");

    let mut next_program = 1u64;
    let mut programs: BTreeMap<ProgramId, Program> = BTreeMap::new();
    let mut start = vec![TraceEvent::RunStarted {
        config: record,
        task: task.clone(),
    }];
    if let Some(files) = &task.initial_program {
        let id = ProgramId(next_program);
        next_program += 1;
        let program = Program {
            id,
            files: files.clone(),
            parent_action_id: BASELINE_NODE,
            round: 0,
            created_from: ProgramOrigin::PlannerSeeded,
        };
        programs.insert(id, program.clone());
        start.push(TraceEvent::InitialProgramAttached { program });
    }
    trace.append_group(0, start)?;

    let mut archive = Archive::new(config.archive_capacity);
    let mut round = 0u32;
    let mut budget_remaining = config.budget;
    let mut best: Option<(ProgramId, f64)> = None;
    let mut consecutive_failures = 0u32;

    let mut step = 0u32;
    while budget_remaining > 0 {
        let mut rng = step_rng(config.rng_seed, step);
        let parents: Vec<ParentContext> = if archive.is_empty() {
            Vec::new()
        } else {
            let mut sampled: Vec<&ArchiveEntry> = (0..config.parents_per_step)
                .map(|_| archive.sample_one(&mut rng, config.epsilon))
                .collect();
            sampled.sort_by_key(|e| Archive::rank(*e));
            sampled
                .into_iter()
                .map(|e| ParentContext {
                    program: programs
                        .get(&e.program_id)
                        .expect("archived programs are retained")
                        .clone(),
                    score: e.score,
                    observation_excerpt: e.observation_excerpt.clone(),
                })
                .collect()
        };
        let program_id = ProgramId(next_program);
        next_program += 1;
        let req = MutationRequest {
            task_digest: digest.clone(),
            parents,
            initial_files: task.initial_program.clone(),
            step,
            new_program_id: program_id,
            round: round + 1,
        };
        let program = match mutator.mutate(&req) {
            Ok(generated) => {
                let program = generated.program;
                if program.id != program_id {
                    return Err(EngineError::Internal(format!(
                        "mutator returned program {}, requested {program_id}",
                        program.id
                    )));
                }
                let coder_blob = generated
                    .raw_exchange
                    .as_ref()
                    .map(|x| trace.store_blob(x))
                    .transpose()?;
                trace.append(
                    round,
                    TraceEvent::CandidateGenerated {
                        node_id: BASELINE_NODE,
                        attempt_index: step,
                        program: program.clone(),
                        coder_blob,
                    },
                )?;
                programs.insert(program.id, program.clone());
                consecutive_failures = 0;
                program
            }
            Err(CoderError::Generation(reason)) => {
                trace.append(
                    round,
                    TraceEvent::GenerationFailed {
                        node_id: BASELINE_NODE,
                        program_id,
                        attempt_index: step,
                        reason,
                    },
                )?;
                step += 1;
                consecutive_failures += 1;
                if consecutive_failures >= MAX_CONSECUTIVE_GENERATION_FAILURES {
                    log::error!(
                        "mutator produced no usable candidate in {consecutive_failures} \
                         consecutive attempts; aborting"
                    );
                    return Ok(result(
                        ExitStatus::BackendError,
                        best,
                        &programs,
                        round,
                        budget_remaining,
                    ));
                }
                continue;
            }
            Err(CoderError::Backend(message)) => {
                log::error!("mutator backend failed: {message}");
                return Ok(result(
                    ExitStatus::BackendError,
                    best,
                    &programs,
                    round,
                    budget_remaining,
                ));
            }
        };

        let ctx = EvalContext {
            round: round + 1,
            work_root: Some(&work_root),
        };
        let observation = match evaluator.evaluate(task, &program, &ctx) {
            Ok(obs) => obs,
            Err(EvalError::Infrastructure(message)) => {
                log::error!("evaluator infrastructure failure: {message}");
                return Ok(result(
                    ExitStatus::InfrastructureError,
                    best,
                    &programs,
                    round,
                    budget_remaining,
                ));
            }
        };
        let scores = match score(task, &observation) {
            Ok(scores) => scores,
            Err(e) => {
                log::error!("evaluator returned an unscorable observation: {e}");
                return Ok(result(
                    ExitStatus::InfrastructureError,
                    best,
                    &programs,
                    round,
                    budget_remaining,
                ));
            }
        };
        round += 1;
        budget_remaining -= 1;
        trace.append(
            round,
            TraceEvent::CandidateEvaluated {
                program_id: program.id,
                observation: observation.clone(),
                scores: scores.clone(),
            },
        )?;
        if best.map_or(true, |(_, s)| scores.aggregate > s) {
            best = Some((program.id, scores.aggregate));
        }
        let outcome = archive.insert(ArchiveEntry {
            program_id: program.id,
            score: scores.aggregate,
            observation_excerpt: observation_excerpt(&observation),
        });
        trace.append(
            round,
            TraceEvent::ArchiveUpdated {
                program_id: program.id,
                inserted: outcome.inserted,
                evicted: outcome.evicted,
            },
        )?;
        step += 1;
    }

    let final_best = BestRef {
        program_id: best.map(|(pid, _)| pid),
        score: best.map(|(_, s)| s),
    };
    trace.append(
        round,
        TraceEvent::RunEnded {
            exit_status: ExitStatus::Completed,
            best: final_best,
        },
    )?;
    Ok(result(
        ExitStatus::Completed,
        best,
        &programs,
        round,
        budget_remaining,
    ))
}

fn result(
    exit_status: ExitStatus,
    best: Option<(ProgramId, f64)>,
    programs: &BTreeMap<ProgramId, Program>,
    rounds_used: u32,
    budget_remaining: u32,
) -> RunResult {
    RunResult {
        exit_status,
        best_program_id: best.map(|(pid, _)| pid),
        best_score: best.map(|(_, s)| s),
        best_program: best.and_then(|(pid, _)| programs.get(&pid)).cloned(),
        rounds_used,
        budget_remaining,
    }
}

/// Decorrelated per-step stream: every step's draws are independent of how
/// many draws earlier steps consumed.
fn step_rng(seed: u64, step: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E3779B97F4A7C15u64.wrapping_mul(step as u64 + 1))
}

/// Greedy scripted mutation: take the best sampled parent's directive set
/// and enable the first listed desirable directive it lacks. Deterministic
/// given the sampled parents; never touches directives outside its list.
pub struct ScriptedMutator {
    desirable: Vec<String>,
    source: String,
}

#[derive(Deserialize)]
struct MutatorFile {
    desirable: Vec<String>,
}

impl ScriptedMutator {
    pub fn new(desirable: Vec<String>) -> ScriptedMutator {
        ScriptedMutator {
            desirable,
            source: "<inline>".to_owned(),
        }
    }

    pub fn load(path: &Path) -> Result<ScriptedMutator, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let file: MutatorFile = toml::from_str(&text)
            .map_err(|e| format!("cannot parse {}: {e}", path.display()))?;
        Ok(ScriptedMutator {
            desirable: file.desirable,
            source: path.display().to_string(),
        })
    }
}

impl ProgramMutator for ScriptedMutator {
    fn mutate(&mut self, req: &MutationRequest) -> Result<GeneratedProgram, CoderError> {
        let manifest = &req.task_digest.file_manifest;
        let primary = manifest
            .first()
            .ok_or_else(|| CoderError::Generation("task manifest is empty".to_owned()))?
            .name
            .clone();
        let base_text = req
            .parents
            .first()
            .map(|p| p.program.files.get(&primary).cloned().unwrap_or_default())
            .or_else(|| req.initial_files.as_ref().and_then(|f| f.get(&primary).cloned()))
            .unwrap_or_default();
        let mut set = crate::eval::landscape::parse_directives(&base_text);
        if let Some(add) = self.desirable.iter().find(|d| !set.contains(*d)) {
            set.insert(add.clone());
        }
        let mut files = BTreeMap::new();
        for spec in manifest {
            let contents = if spec.name == primary {
                crate::eval::landscape::render_directives(&set)
            } else {
                String::new()
            };
            files.insert(spec.name.clone(), contents);
        }
        Ok(GeneratedProgram {
            program: Program {
                id: req.new_program_id,
                files,
                parent_action_id: BASELINE_NODE,
                round: req.round,
                created_from: ProgramOrigin::BaselineMutation,
            },
            raw_exchange: None,
        })
    }

    fn describe(&self) -> String {
        format!("scripted:{}", self.source)
    }
}

const MUTATOR_SYSTEM_PROMPT: &str = "You improve programs by recombining and mutating the \
provided parent implementations. Reply with every requested file as an XML-tagged block of \
the form <file name=\"NAME\">...</file>. Never omit, rename, or add files.";

/// Renders the mutation prompt: task spec, then each parent program with
/// its serialized observation, newest best first.
pub fn render_mutation_prompt(req: &MutationRequest) -> String {
    let digest = &req.task_digest;
    let mut out = String::new();
    out.push_str(
        "You are an optimizing code mutator. Produce one improved implementation for the \
         following specification.\n",
    );
    out.push_str(&format!("\nObjective:\n{}\n", digest.objective_text));
    out.push_str(&format!("\nSpecification:\n{}\n", digest.reference_impl));
    if !digest.instructions.is_empty() {
        out.push_str(&format!("\nRequirements:\n{}\n", digest.instructions));
    }
    if req.parents.is_empty() {
        if let Some(files) = &req.initial_files {
            out.push_str("\nStarting implementation:\n");
            for (name, contents) in files {
                out.push_str(&format!("<file name=\"{name}\">\n{contents}\n</file>\n"));
            }
        }
    } else {
        for (i, parent) in req.parents.iter().enumerate() {
            out.push_str(&format!(
                "\nParent {} (score {:.4}; observations: {}):\n",
                i + 1,
                parent.score,
                parent.observation_excerpt
            ));
            for (name, contents) in &parent.program.files {
                out.push_str(&format!("<file name=\"{name}\">\n{contents}\n</file>\n"));
            }
        }
    }
    out.push_str(&format!(
        "\nIMPORTANT: Generate code in XML format with exactly {} files with these strict \
         names:\n\n",
        digest.file_manifest.len()
    ));
    for spec in &digest.file_manifest {
        out.push_str(&format!("<file name=\"{}\">\n...\n</file>\n\n", spec.name));
    }
    out.push_str("Performance targets (lower is better):\n");
    for w in &digest.workloads {
        let params = serde_json::to_string(&w.parameters).expect("parameters serialize");
        out.push_str(&format!("- {} {params}: {} us\n", w.workload_id, w.p_ref_us));
    }
    out
}

#[derive(Deserialize)]
struct LlmMutatorFile {
    #[serde(flatten)]
    llm: LlmConfig,
}

/// LLM-backed mutation policy. Output discipline mirrors the coder: wrong
/// file sets earn one corrective re-prompt, then a generation failure.
pub struct LlmMutator {
    client: ChatClient,
    source: PathBuf,
}

impl LlmMutator {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read mutator config {}: {e}", path.display()))?;
        let file: LlmMutatorFile = toml::from_str(&raw)
            .map_err(|e| format!("cannot parse mutator config {}: {e}", path.display()))?;
        let client = ChatClient::over_http(file.llm).map_err(|e| e.0)?;
        Ok(LlmMutator {
            client,
            source: path.to_owned(),
        })
    }

    #[cfg(test)]
    pub fn with_transport(
        config: LlmConfig,
        transport: Box<dyn crate::llm::ChatTransport>,
    ) -> Self {
        LlmMutator {
            client: ChatClient::new(config, transport),
            source: PathBuf::from("<test>"),
        }
    }
}

impl ProgramMutator for LlmMutator {
    fn mutate(&mut self, req: &MutationRequest) -> Result<GeneratedProgram, CoderError> {
        let mut messages = vec![
            ChatMessage::system(MUTATOR_SYSTEM_PROMPT),
            ChatMessage::user(render_mutation_prompt(req)),
        ];
        let mut last_error = String::new();
        for _pass in 0..2 {
            let outcome = self
                .client
                .complete(&messages, self.client.config().temperature)
                .map_err(|e| CoderError::Backend(e.0))?;
            let files = scan_file_tags(&outcome.content);
            match validate_manifest(files, &req.task_digest.file_manifest) {
                Ok(map) => {
                    return Ok(GeneratedProgram {
                        program: Program {
                            id: req.new_program_id,
                            files: map,
                            parent_action_id: BASELINE_NODE,
                            round: req.round,
                            created_from: ProgramOrigin::BaselineMutation,
                        },
                        raw_exchange: Some(RawExchange {
                            request_body: outcome.request_body,
                            response_body: outcome.response_body,
                        }),
                    })
                }
                Err(why) => {
                    messages.push(ChatMessage::assistant(outcome.content.clone()));
                    messages.push(ChatMessage::user(format!(
                        "Your previous reply was unusable: {why}. Reply again with exactly \
                         the required files as <file name=\"...\"> blocks."
                    )));
                    last_error = why;
                }
            }
        }
        Err(CoderError::Generation(format!(
            "output did not match the file manifest after a corrective retry: {last_error}"
        )))
    }

    fn describe(&self) -> String {
        format!("llm:{}", self.source.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::landscape::LandscapeEvaluator;
    use crate::testutil::{demo_landscape, demo_task};
    use crate::trace::{scan_log, ClockMode, TRACE_FILE};
    use tempfile::tempdir;

    fn entry(pid: u64, score: f64) -> ArchiveEntry {
        ArchiveEntry {
            program_id: ProgramId(pid),
            score,
            observation_excerpt: String::new(),
        }
    }

    #[test]
    fn archive_keeps_descending_order_and_capacity() {
        let mut archive = Archive::new(3);
        for (pid, score) in [(1, 10.0), (2, 30.0), (3, 20.0)] {
            let out = archive.insert(entry(pid, score));
            assert!(out.inserted);
            assert_eq!(out.evicted, None);
        }
        let scores: Vec<f64> = archive.entries().iter().map(|e| e.score).collect();
        assert_eq!(scores, vec![30.0, 20.0, 10.0]);

        // A better sixth entry evicts the current worst.
        let out = archive.insert(entry(4, 25.0));
        assert!(out.inserted);
        assert_eq!(out.evicted, Some(ProgramId(1)));
        let ids: Vec<u64> = archive.entries().iter().map(|e| e.program_id.0).collect();
        assert_eq!(ids, vec![2, 4, 3]);
    }

    #[test]
    fn worse_candidate_bounces_off_a_full_archive() {
        let mut archive = Archive::new(2);
        archive.insert(entry(1, 50.0));
        archive.insert(entry(2, 40.0));
        let out = archive.insert(entry(3, 30.0));
        assert!(!out.inserted);
        assert_eq!(out.evicted, None);
        assert_eq!(archive.entries().len(), 2);

        // A tie with the worst keeps the earlier program.
        let out = archive.insert(entry(4, 40.0));
        assert!(!out.inserted);
        assert_eq!(out.evicted, None);
        let ids: Vec<u64> = archive.entries().iter().map(|e| e.program_id.0).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn zero_scores_enter_only_while_not_full() {
        let mut archive = Archive::new(2);
        assert!(archive.insert(entry(1, 0.0)).inserted, "bootstrap allowed");
        assert!(archive.insert(entry(2, 10.0)).inserted);
        let out = archive.insert(entry(3, 0.0));
        assert!(!out.inserted);
        assert_eq!(out.evicted, None);
        assert_eq!(archive.entries().len(), 2);
    }

    #[test]
    fn scripted_mutator_adds_first_missing_desirable_directive() {
        let mut mutator =
            ScriptedMutator::new(vec!["tile_a".to_owned(), "vectorize".to_owned()]);
        let digest = TaskDigest::of(&demo_task());
        let parent = Program {
            id: ProgramId(1),
            files: [(
                "directives.txt".to_owned(),
                "directives:\ntile_a\n".to_owned(),
            )]
            .into_iter()
            .collect(),
            parent_action_id: BASELINE_NODE,
            round: 1,
            created_from: ProgramOrigin::BaselineMutation,
        };
        let req = MutationRequest {
            task_digest: digest.clone(),
            parents: vec![ParentContext {
                program: parent,
                score: 62.5,
                observation_excerpt: String::new(),
            }],
            initial_files: None,
            step: 1,
            new_program_id: ProgramId(2),
            round: 2,
        };
        let out = mutator.mutate(&req).unwrap();
        assert_eq!(
            out.program.files["directives.txt"],
            "directives:\ntile_a\nvectorize\n"
        );

        // Bootstrap: no parents, no initial files, empty set plus tile_a.
        let req = MutationRequest {
            task_digest: digest,
            parents: Vec::new(),
            initial_files: None,
            step: 0,
            new_program_id: ProgramId(1),
            round: 1,
        };
        let out = mutator.mutate(&req).unwrap();
        assert_eq!(out.program.files["directives.txt"], "directives:\ntile_a\n");
    }

    fn demo_baseline(run_dir: &Path, config: BaselineConfig) -> RunResult {
        let task = demo_task();
        let mut mutator =
            ScriptedMutator::new(vec!["tile_a".to_owned(), "vectorize".to_owned()]);
        let mut evaluator = LandscapeEvaluator::new(demo_landscape());
        let mut trace = TraceWriter::create(run_dir, ClockMode::Logical).unwrap();
        run_baseline(&task, config, &mut mutator, &mut evaluator, &mut trace).unwrap()
    }

    #[test]
    fn baseline_spends_exactly_the_budget_and_plateaus_below_the_optimum() {
        let dir = tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let config = BaselineConfig {
            budget: 40,
            archive_capacity: 8,
            parents_per_step: 2,
            epsilon: 0.1,
            rng_seed: 0,
        };
        let result = demo_baseline(&run_dir, config);
        assert_eq!(result.exit_status, ExitStatus::Completed);
        assert_eq!(result.rounds_used, 40);
        assert_eq!(result.budget_remaining, 0);

        // The greedy mutator never discovers the prerequisite directive, so
        // every reachable program scores at most 62.5; the joint optimum
        // (119.05) stays out of reach at any seed.
        assert_eq!(result.best_score, Some(62.5));

        let scan = scan_log(&run_dir.join(TRACE_FILE)).unwrap();
        let evaluated = scan
            .records
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::CandidateEvaluated { .. }))
            .count();
        assert_eq!(evaluated, 40);
        let archive_updates = scan
            .records
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::ArchiveUpdated { .. }))
            .count();
        assert_eq!(archive_updates, 40, "one insertion attempt per evaluation");
        assert!(matches!(
            scan.records.last().unwrap().event,
            TraceEvent::RunEnded {
                exit_status: ExitStatus::Completed,
                ..
            }
        ));
    }

    #[test]
    fn baseline_is_deterministic_per_seed() {
        let dir = tempdir().unwrap();
        let config = BaselineConfig {
            budget: 25,
            archive_capacity: 6,
            parents_per_step: 2,
            epsilon: 0.1,
            rng_seed: 42,
        };
        demo_baseline(&dir.path().join("a"), config);
        demo_baseline(&dir.path().join("b"), config);
        let a = std::fs::read(dir.path().join("a").join(TRACE_FILE)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(TRACE_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failing_mutator_aborts_without_spending_budget() {
        struct NeverWorks;
        impl ProgramMutator for NeverWorks {
            fn mutate(&mut self, _req: &MutationRequest) -> Result<GeneratedProgram, CoderError> {
                Err(CoderError::Generation("nope".to_owned()))
            }
            fn describe(&self) -> String {
                "never-works".to_owned()
            }
        }
        let dir = tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let task = demo_task();
        let mut mutator = NeverWorks;
        let mut evaluator = LandscapeEvaluator::new(demo_landscape());
        let mut trace = TraceWriter::create(&run_dir, ClockMode::Logical).unwrap();
        let result = run_baseline(
            &task,
            BaselineConfig::default(),
            &mut mutator,
            &mut evaluator,
            &mut trace,
        )
        .unwrap();
        assert_eq!(result.exit_status, ExitStatus::BackendError);
        assert_eq!(result.budget_remaining, 120);
        let scan = scan_log(&run_dir.join(TRACE_FILE)).unwrap();
        let failures = scan
            .records
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::GenerationFailed { .. }))
            .count();
        assert_eq!(failures as u32, MAX_CONSECUTIVE_GENERATION_FAILURES);
    }

    #[test]
    fn config_validation_rejects_degenerate_values() {
        let ok = BaselineConfig::default();
        assert!(ok.validate().is_ok());
        assert!(BaselineConfig { budget: 0, ..ok }.validate().is_err());
        assert!(BaselineConfig {
            archive_capacity: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(BaselineConfig {
            parents_per_step: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(BaselineConfig {
            epsilon: 1.5,
            ..ok
        }
        .validate()
        .is_err());
    }
}
