//! Deterministic coder for tests and repeatable demos: interprets
//! "add <directive>" intents as directive-set extensions of the parent
//! program's set.

use std::collections::{BTreeMap, BTreeSet};

use crate::eval::landscape::{parse_directives, render_directives};
use crate::tree::Program;

use super::{Coder, CoderError, CoderRequest, GeneratedProgram};

/// Maps intents straight onto directive sets. Intents of the form
/// "add <name>" extend the parent set; any other intent reproduces it
/// unchanged (the empty set for seeds). The first manifest file carries the
/// rendered directive list; any further files are left empty.
#[derive(Debug, Default)]
pub struct ScriptedCoder;

impl ScriptedCoder {
    pub fn new() -> Self {
        Self
    }
}

impl Coder for ScriptedCoder {
    fn generate(&mut self, req: &CoderRequest) -> Result<GeneratedProgram, CoderError> {
        let manifest = &req.task_digest.file_manifest;
        let Some(primary) = manifest.first() else {
            return Err(CoderError::Generation("file manifest is empty".to_owned()));
        };
        let mut directives: BTreeSet<String> = match &req.parent_program {
            Some(parent) => parent
                .files
                .get(&primary.name)
                .map(|text| parse_directives(text))
                .unwrap_or_default(),
            None => BTreeSet::new(),
        };
        if let Some(name) = req.intent.strip_prefix("add ") {
            directives.insert(name.trim().to_owned());
        }
        let mut files = BTreeMap::new();
        for (index, spec) in manifest.iter().enumerate() {
            let body = if index == 0 { render_directives(&directives) } else { String::new() };
            files.insert(spec.name.clone(), body);
        }
        Ok(GeneratedProgram {
            program: Program {
                id: req.new_program_id,
                files,
                parent_action_id: req.parent_action_id,
                round: req.round,
                created_from: req.origin,
            },
            raw_exchange: None,
        })
    }

    fn default_temperature(&self) -> f64 {
        0.0
    }

    fn describe(&self) -> String {
        "scripted".to_owned()
    }
}
