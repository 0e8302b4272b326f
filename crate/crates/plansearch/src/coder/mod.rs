//! Code-generation backends: the stochastic implementation policy.
//!
//! A coder turns one selected action (parent program + intent) into a
//! candidate program bundle. The prompt template and the tagged-block
//! output convention are fixed here; backends are an LLM adapter and a
//! deterministic directive mapper for tests.

pub mod llm;
pub mod scripted;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{RawExchange, TaskDigest};
use crate::tree::{NodeId, Program, ProgramId, ProgramOrigin};

/// Everything one generation call conditions on, plus the identity the
/// resulting program will carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoderRequest {
    pub task_digest: TaskDigest,
    /// The optimization intent to apply.
    pub intent: String,
    /// The implementation to build on; absent for seed actions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_program: Option<Program>,
    /// Sample number within the current refinement, from 0.
    pub attempt_index: u32,
    /// Failure excerpt of the previous attempt; present iff feedback is
    /// enabled and attempt_index > 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    pub sampling_temperature: f64,
    /// Identity fields for the program this call will produce.
    pub new_program_id: ProgramId,
    pub parent_action_id: NodeId,
    pub round: u32,
    pub origin: ProgramOrigin,
}

#[derive(Debug, Error)]
pub enum CoderError {
    /// Unusable output after the backend's own re-prompt; counts toward
    /// stagnation without consuming budget.
    #[error("generation failed: {0}")]
    Generation(String),
    /// Backend unreachable; the run aborts.
    #[error("coder backend unavailable: {0}")]
    Backend(String),
}

/// A generated program plus the raw wire exchange for blob storage.
#[derive(Debug)]
pub struct GeneratedProgram {
    pub program: Program,
    pub raw_exchange: Option<RawExchange>,
}

pub trait Coder {
    fn generate(&mut self, req: &CoderRequest) -> Result<GeneratedProgram, CoderError>;

    /// Temperature the engine should put in requests by default.
    fn default_temperature(&self) -> f64;

    /// Short spec string recorded in traces.
    fn describe(&self) -> String;
}

/// Renders the generation prompt. Pure and byte-stable: same request, same
/// bytes.
pub fn render_prompt(req: &CoderRequest) -> String {
    let digest = &req.task_digest;
    let mut out = String::new();
    out.push_str(
        "You are a code generator. Generate an implementation for the following \
         specification.\n",
    );
    out.push_str(&format!("\nObjective:\n{}\n", digest.objective_text));
    out.push_str(&format!("\nSpecification:\n{}\n", digest.reference_impl));
    if !digest.instructions.is_empty() {
        out.push_str(&format!("\nRequirements:\n{}\n", digest.instructions));
    }
    out.push_str(&format!("\nOptimization intent to apply:\n{}\n", req.intent));
    if let Some(parent) = &req.parent_program {
        out.push_str("\nCurrent implementation (apply the intent to this code):\n");
        for (name, contents) in &parent.files {
            out.push_str(&format!("<file name=\"{name}\">\n{contents}\n</file>\n"));
        }
    }
    if let Some(feedback) = &req.feedback {
        out.push_str(&format!("\nPrevious attempt failed with:\n{feedback}\n"));
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

/// Scans backend text for `<tag name="FILE">...</tag>` blocks and returns
/// (file name, contents) pairs in order of appearance. The element name is
/// free; only the name attribute identifies the file.
pub fn scan_file_tags(raw: &str) -> Vec<(String, String)> {
    let mut files = Vec::new();
    let mut at = 0;
    while let Some(open) = raw[at..].find('<').map(|i| i + at) {
        at = open + 1;
        let rest = &raw[open + 1..];
        if rest.starts_with('/') {
            continue;
        }
        let word_len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        if word_len == 0 {
            continue;
        }
        let word = &rest[..word_len];
        let after_word = &rest[word_len..];
        let Some(name_at) = after_word.find("name=\"") else { continue };
        // Only attributes inside this tag count.
        let Some(tag_close) = after_word.find('>') else { continue };
        if name_at > tag_close {
            continue;
        }
        let name_start = name_at + "name=\"".len();
        let Some(name_len) = after_word[name_start..].find('"') else { continue };
        let name = &after_word[name_start..name_start + name_len];
        let content_start = open + 1 + word_len + tag_close + 1;
        let closing = format!("</{word}>");
        let Some(close_rel) = raw[content_start..].find(&closing) else { continue };
        let content = &raw[content_start..content_start + close_rel];
        let content = content.strip_prefix('\n').unwrap_or(content);
        let content = content.strip_suffix('\n').unwrap_or(content);
        files.push((name.to_owned(), content.to_owned()));
        at = content_start + close_rel + closing.len();
    }
    files
}

/// Checks a parsed file set against the manifest: every declared file must
/// be present exactly once and nothing else. Returns the validated map.
pub fn validate_manifest(
    files: Vec<(String, String)>,
    manifest: &[crate::task::FileSpec],
) -> Result<BTreeMap<String, String>, String> {
    let expected: BTreeSet<&str> = manifest.iter().map(|f| f.name.as_str()).collect();
    let mut map = BTreeMap::new();
    let mut extra = Vec::new();
    for (name, content) in files {
        if !expected.contains(name.as_str()) {
            extra.push(name);
        } else if map.insert(name.clone(), content).is_some() {
            return Err(format!("file {name:?} appears more than once"));
        }
    }
    let missing: Vec<&str> = expected
        .iter()
        .copied()
        .filter(|name| !map.contains_key(*name))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(format!(
            "output must contain exactly {:?}; missing {missing:?}, unexpected {extra:?}",
            expected.iter().collect::<Vec<_>>()
        ));
    }
    Ok(map)
}
