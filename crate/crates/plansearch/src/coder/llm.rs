//! LLM-backed coder: prompt rendering, tagged-file extraction, manifest
//! enforcement with one corrective re-prompt.

use std::path::{Path, PathBuf};

#[cfg(test)]
use crate::llm::ChatTransport;
use crate::llm::{ChatClient, ChatMessage, LlmConfig};
use crate::planner::RawExchange;
use crate::tree::Program;

use super::{render_prompt, scan_file_tags, validate_manifest, Coder, CoderError, CoderRequest, GeneratedProgram};

const SYSTEM_PROMPT: &str = "You write complete, self-contained code. Reply with every \
requested file as an XML-tagged block of the form <file name=\"NAME\">...</file> and \
nothing else outside those blocks matters. Never omit, rename, or add files.";

#[derive(Debug, serde::Deserialize)]
struct LlmCoderFile {
    #[serde(flatten)]
    llm: LlmConfig,
}

/// Coder that asks a chat-completion endpoint for the program. Invalid
/// output (wrong file set) earns exactly one corrective re-prompt before the
/// attempt is declared a generation failure.
pub struct LlmCoder {
    client: ChatClient,
    source: PathBuf,
}

impl LlmCoder {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read coder config {}: {e}", path.display()))?;
        let file: LlmCoderFile = toml::from_str(&raw)
            .map_err(|e| format!("cannot parse coder config {}: {e}", path.display()))?;
        let client = ChatClient::over_http(file.llm).map_err(|e| e.0)?;
        Ok(LlmCoder { client, source: path.to_owned() })
    }

    #[cfg(test)]
    pub fn with_transport(config: LlmConfig, transport: Box<dyn ChatTransport>) -> Self {
        LlmCoder {
            client: ChatClient::new(config, transport),
            source: PathBuf::from("<test>"),
        }
    }
}

impl Coder for LlmCoder {
    fn generate(&mut self, req: &CoderRequest) -> Result<GeneratedProgram, CoderError> {
        let mut messages = vec![
            ChatMessage::system(SYSTEM_PROMPT),
            ChatMessage::user(render_prompt(req)),
        ];
        let mut last_error = String::new();
        // First pass plus one corrective re-prompt.
        for _pass in 0..2 {
            let outcome = self
                .client
                .complete(&messages, req.sampling_temperature)
                .map_err(|e| CoderError::Backend(e.0))?;
            let files = scan_file_tags(&outcome.content);
            match validate_manifest(files, &req.task_digest.file_manifest) {
                Ok(map) => {
                    return Ok(GeneratedProgram {
                        program: Program {
                            id: req.new_program_id,
                            files: map,
                            parent_action_id: req.parent_action_id,
                            round: req.round,
                            created_from: req.origin,
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

    fn default_temperature(&self) -> f64 {
        self.client.config().temperature
    }

    fn describe(&self) -> String {
        format!("llm:{}", self.source.display())
    }
}
