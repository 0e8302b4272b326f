//! Chat-completion client shared by the LLM planner and coder backends.
//!
//! Speaks the common `POST {base_url}/chat/completions` wire format. The
//! HTTP layer sits behind [`ChatTransport`] so tests can substitute a
//! scripted transport; retry policy (connection errors, 429, 5xx) lives in
//! [`ChatClient`] above the transport. The credential is read from the
//! environment variable named in the config and never stored; request and
//! response bodies are redacted before they leave this module.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::redact_secret;

fn default_temperature() -> f64 {
    0.8
}

fn default_timeout_s() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    /// Endpoint base, e.g. `https://api.example.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
    /// Transport-level retries on top of the first attempt.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

impl LlmConfig {
    pub fn load(path: &Path) -> Result<LlmConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".to_owned(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".to_owned(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".to_owned(),
            content: content.into(),
        }
    }
}

/// One raw HTTP answer, whatever the status.
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait ChatTransport: Send {
    /// Posts a chat-completion body; `Err` means no HTTP response at all.
    fn post_chat(&self, config: &LlmConfig, api_key: &str, body: &str)
        -> Result<HttpResponse, String>;
}

#[derive(Debug, Error)]
#[error("chat backend: {0}")]
pub struct ChatError(pub String);

/// The completed call: assistant text plus the redacted wire bodies for
/// blob storage.
#[derive(Debug)]
pub struct ChatOutcome {
    pub content: String,
    pub request_body: String,
    pub response_body: String,
}

pub struct ChatClient {
    config: LlmConfig,
    transport: Box<dyn ChatTransport>,
}

impl ChatClient {
    pub fn new(config: LlmConfig, transport: Box<dyn ChatTransport>) -> Self {
        ChatClient { config, transport }
    }

    pub fn over_http(config: LlmConfig) -> Result<Self, ChatError> {
        let transport = HttpChatTransport::new(&config)?;
        Ok(ChatClient::new(config, Box::new(transport)))
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    /// Runs one completion with retries on transient failures (connection
    /// errors, 429, 5xx, unparsable 2xx bodies). Other statuses fail fast.
    pub fn complete(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
    ) -> Result<ChatOutcome, ChatError> {
        let api_key = std::env::var(&self.config.api_key_env).map_err(|_| {
            ChatError(format!(
                "environment variable {} is not set",
                self.config.api_key_env
            ))
        })?;
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": temperature,
        });
        if let Some(max_tokens) = self.config.max_tokens {
            body["max_tokens"] = serde_json::json!(max_tokens);
        }
        let body = serde_json::to_string(&body).expect("body serializes");

        let attempts = self.config.retries + 1;
        let mut last_failure = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 * u64::from(attempt)));
            }
            match self.transport.post_chat(&self.config, &api_key, &body) {
                Err(e) => last_failure = format!("transport error: {e}"),
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last_failure = format!(
                        "HTTP {}: {}",
                        resp.status,
                        redact_secret(&fragment(&resp.body), &api_key)
                    );
                }
                Ok(resp) if !(200..300).contains(&resp.status) => {
                    return Err(ChatError(format!(
                        "HTTP {}: {}",
                        resp.status,
                        redact_secret(&fragment(&resp.body), &api_key)
                    )));
                }
                Ok(resp) => match extract_content(&resp.body) {
                    Some(content) => {
                        return Ok(ChatOutcome {
                            content,
                            request_body: redact_secret(&body, &api_key),
                            response_body: redact_secret(&resp.body, &api_key),
                        });
                    }
                    None => {
                        last_failure = format!(
                            "unparsable completion body: {}",
                            redact_secret(&fragment(&resp.body), &api_key)
                        );
                    }
                },
            }
        }
        Err(ChatError(format!(
            "{last_failure} (after {attempts} attempts)"
        )))
    }
}

fn fragment(text: &str) -> String {
    const LIMIT: usize = 200;
    let mut end = text.len().min(LIMIT);
    while end > 0 && !text.is_char_boundary(end) {
        end -= 1;
    }
    text[..end].to_owned()
}

fn extract_content(body: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(body).ok()?;
    value
        .get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_owned)
}

pub struct HttpChatTransport {
    client: reqwest::blocking::Client,
}

impl HttpChatTransport {
    pub fn new(config: &LlmConfig) -> Result<Self, ChatError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| ChatError(format!("cannot build HTTP client: {e}")))?;
        Ok(HttpChatTransport { client })
    }
}

impl ChatTransport for HttpChatTransport {
    fn post_chat(
        &self,
        config: &LlmConfig,
        api_key: &str,
        body: &str,
    ) -> Result<HttpResponse, String> {
        let url = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        let response = self
            .client
            .post(&url)
            .header("Authorization", format!("Bearer {api_key}"))
            .header("Content-Type", "application/json")
            .body(body.to_owned())
            .send()
            .map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::Mutex;

    struct FakeTransport {
        responses: Mutex<Vec<Result<HttpResponse, String>>>,
    }

    impl FakeTransport {
        fn new(mut responses: Vec<Result<HttpResponse, String>>) -> Self {
            responses.reverse();
            FakeTransport {
                responses: Mutex::new(responses),
            }
        }
    }

    impl ChatTransport for FakeTransport {
        fn post_chat(
            &self,
            _config: &LlmConfig,
            _api_key: &str,
            _body: &str,
        ) -> Result<HttpResponse, String> {
            self.responses
                .lock()
                .unwrap()
                .pop()
                .expect("unexpected extra call")
        }
    }

    fn config(key_env: &str) -> LlmConfig {
        LlmConfig {
            base_url: "http://unused".to_owned(),
            model: "test-model".to_owned(),
            api_key_env: key_env.to_owned(),
            temperature: 0.8,
            max_tokens: None,
            timeout_s: 5.0,
            retries: 2,
        }
    }

    fn completion_body(content: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}]
        })
        .to_string()
    }

    #[test]
    fn success_returns_content_and_bodies() {
        std::env::set_var("CHAT_TEST_KEY_A", "sekret");
        let client = ChatClient::new(
            config("CHAT_TEST_KEY_A"),
            Box::new(FakeTransport::new(vec![Ok(HttpResponse {
                status: 200,
                body: completion_body("hello"),
            })])),
        );
        let out = client.complete(&[ChatMessage::user("hi")], 0.5).unwrap();
        assert_eq!(out.content, "hello");
        assert!(out.request_body.contains("\"temperature\":0.5"));
        assert!(out.response_body.contains("hello"));
    }

    #[test]
    fn retries_on_server_error_then_succeeds() {
        std::env::set_var("CHAT_TEST_KEY_B", "sekret");
        let client = ChatClient::new(
            config("CHAT_TEST_KEY_B"),
            Box::new(FakeTransport::new(vec![
                Ok(HttpResponse {
                    status: 500,
                    body: "boom".to_owned(),
                }),
                Err("connection reset".to_owned()),
                Ok(HttpResponse {
                    status: 200,
                    body: completion_body("recovered"),
                }),
            ])),
        );
        let out = client.complete(&[ChatMessage::user("hi")], 0.8).unwrap();
        assert_eq!(out.content, "recovered");
    }

    #[test]
    fn fails_fast_on_auth_error() {
        std::env::set_var("CHAT_TEST_KEY_C", "sekret");
        let client = ChatClient::new(
            config("CHAT_TEST_KEY_C"),
            Box::new(FakeTransport::new(vec![Ok(HttpResponse {
                status: 401,
                body: "unauthorized".to_owned(),
            })])),
        );
        let err = client.complete(&[ChatMessage::user("hi")], 0.8).unwrap_err();
        assert!(err.0.contains("401"), "{err}");
    }

    #[test]
    fn exhausted_retries_report_last_failure() {
        std::env::set_var("CHAT_TEST_KEY_D", "sekret");
        let client = ChatClient::new(
            config("CHAT_TEST_KEY_D"),
            Box::new(FakeTransport::new(vec![
                Ok(HttpResponse { status: 500, body: "a".to_owned() }),
                Ok(HttpResponse { status: 503, body: "b".to_owned() }),
                Ok(HttpResponse { status: 500, body: "c".to_owned() }),
            ])),
        );
        let err = client.complete(&[ChatMessage::user("hi")], 0.8).unwrap_err();
        assert!(err.0.contains("after 3 attempts"), "{err}");
    }

    #[test]
    fn missing_credential_names_the_variable_only() {
        let client = ChatClient::new(
            config("CHAT_TEST_KEY_UNSET"),
            Box::new(FakeTransport::new(vec![])),
        );
        let err = client.complete(&[ChatMessage::user("hi")], 0.8).unwrap_err();
        assert!(err.0.contains("CHAT_TEST_KEY_UNSET"), "{err}");
    }

    #[test]
    fn secret_is_redacted_from_stored_bodies() {
        std::env::set_var("CHAT_TEST_KEY_E", "sekret");
        let client = ChatClient::new(
            config("CHAT_TEST_KEY_E"),
            Box::new(FakeTransport::new(vec![Ok(HttpResponse {
                status: 200,
                body: completion_body("echoing sekret back"),
            })])),
        );
        let out = client.complete(&[ChatMessage::user("hi")], 0.8).unwrap();
        assert!(!out.response_body.contains("sekret"));
        assert!(out.response_body.contains("[redacted]"));
    }

    /// Minimal one-shot HTTP/1.1 server for exercising the real transport.
    fn serve_once(listener: TcpListener, status_line: &'static str, body: String) {
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 8192];
            let mut seen = Vec::new();
            loop {
                let n = stream.read(&mut buf).unwrap();
                seen.extend_from_slice(&buf[..n]);
                if let Some(header_end) = find_header_end(&seen) {
                    let headers = String::from_utf8_lossy(&seen[..header_end]).to_lowercase();
                    let content_length: usize = headers
                        .lines()
                        .find_map(|l| l.strip_prefix("content-length:"))
                        .map(|v| v.trim().parse().unwrap())
                        .unwrap_or(0);
                    if seen.len() >= header_end + 4 + content_length {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            let response = format!(
                "HTTP/1.1 {status_line}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        });
    }

    fn find_header_end(bytes: &[u8]) -> Option<usize> {
        bytes.windows(4).position(|w| w == b"\r\n\r\n")
    }

    #[test]
    fn http_transport_round_trips() {
        std::env::set_var("CHAT_TEST_KEY_F", "sekret");
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        serve_once(listener, "200 OK", completion_body("over the wire"));

        let mut cfg = config("CHAT_TEST_KEY_F");
        cfg.base_url = format!("http://{addr}/v1");
        cfg.retries = 0;
        let client = ChatClient::over_http(cfg).unwrap();
        let out = client.complete(&[ChatMessage::user("ping")], 0.8).unwrap();
        assert_eq!(out.content, "over the wire");
    }
}
