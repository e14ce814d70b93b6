//! Backend-neutral multimodal model invocation.
//!
//! Every model call in the pipeline goes through the [`Backend`] trait. Two
//! implementations ship here: [`ScriptedBackend`], a deterministic substring
//! matcher used by tests and offline demos, and [`OpenAiBackend`], a blocking
//! client for OpenAI-compatible `/v1/chat/completions` endpoints that accept
//! base64 image content parts.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("API error {status}: {body}")]
    Api { status: u16, body: String },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("no script entry matches request text {0:?}")]
    NoScriptMatch(String),
    #[error("unsupported image MIME type {0:?}")]
    UnsupportedMime(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePart {
    pub mime_type: String,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportExample {
    pub image: ImagePart,
    pub label: String,
}

/// One multimodal chat request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub system_text: String,
    pub user_text: String,
    pub images: Vec<ImagePart>,
    pub support_examples: Vec<SupportExample>,
    /// Allowed answers, when the endpoint can constrain decoding. Advisory only.
    pub decode_constraint: Option<Vec<String>>,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    /// Wall-clock seconds measured by the backend around the call.
    pub latency: f64,
    pub token_counts: Option<(u64, u64)>,
    pub backend_id: String,
    /// Retries performed before this response (0 when the first attempt succeeded).
    #[serde(default)]
    pub retries: u32,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Whether the backend accepts more than one image per request.
    fn supports_multi_image(&self) -> bool {
        false
    }

    fn complete(&self, request: &PromptRequest) -> Result<ModelResponse, BackendError>;
}

/// Content part carrying an image as a base64 data URL.
pub fn encode_image_payload(bytes: &[u8], mime_type: &str) -> Result<Value, BackendError> {
    match mime_type {
        "image/jpeg" | "image/png" => {}
        other => return Err(BackendError::UnsupportedMime(other.to_string())),
    }
    let url = format!("data:{mime_type};base64,{}", BASE64.encode(bytes));
    Ok(json!({ "type": "image_url", "image_url": { "url": url } }))
}

/// MIME type for an image path, by extension.
pub fn mime_for_path(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "jpg" | "jpeg" => Some("image/jpeg"),
        "png" => Some("image/png"),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring that must occur in the request's user text. Empty matches all.
    pub matcher: String,
    pub response: String,
    #[serde(default)]
    pub consume_once: bool,
}

impl ScriptEntry {
    pub fn new(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        Self { matcher: matcher.into(), response: response.into(), consume_once: false }
    }

    pub fn once(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        Self { matcher: matcher.into(), response: response.into(), consume_once: true }
    }
}

/// Deterministic backend returning the first matching script entry.
///
/// Entries marked `consume_once` are skipped after they have answered once,
/// which lets a script emulate a conversation that progresses.
#[derive(Debug)]
pub struct ScriptedBackend {
    id: String,
    entries: Vec<ScriptEntry>,
    consumed: Mutex<Vec<bool>>,
    latency: f64,
    multi_image: bool,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, BackendError> {
        if entries.is_empty() {
            return Err(BackendError::InvalidConfig("script must not be empty".into()));
        }
        let n = entries.len();
        Ok(Self {
            id: "scripted".to_string(),
            entries,
            consumed: Mutex::new(vec![false; n]),
            latency: 0.0,
            multi_image: true,
        })
    }

    /// Loads a JSONL script: one `{"matcher", "response", "consume_once"}` per line.
    pub fn from_jsonl(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                BackendError::InvalidConfig(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Fixed latency reported on every response (seconds).
    pub fn with_latency(mut self, seconds: f64) -> Self {
        self.latency = seconds.max(0.0);
        self
    }

    pub fn with_multi_image(mut self, enabled: bool) -> Self {
        self.multi_image = enabled;
        self
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports_multi_image(&self) -> bool {
        self.multi_image
    }

    fn complete(&self, request: &PromptRequest) -> Result<ModelResponse, BackendError> {
        let mut consumed = self.consumed.lock().expect("script lock poisoned");
        let hit = self
            .entries
            .iter()
            .enumerate()
            .find(|(i, e)| !consumed[*i] && request.user_text.contains(&e.matcher));
        match hit {
            Some((i, entry)) => {
                if entry.consume_once {
                    consumed[i] = true;
                }
                Ok(ModelResponse {
                    text: entry.response.clone(),
                    latency: self.latency,
                    token_counts: None,
                    backend_id: self.id.clone(),
                    retries: 0,
                })
            }
            None => {
                let excerpt: String = request.user_text.chars().take(80).collect();
                Err(BackendError::NoScriptMatch(excerpt))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. No key is sent
    /// when the variable is unset.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub retry_backoff_base_secs: f64,
    pub multi_image: bool,
    /// JSONL file receiving request/response bodies with image payloads elided.
    pub debug_log: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model_name: String::new(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            timeout_secs: 120.0,
            max_retries: 3,
            retry_backoff_base_secs: 1.0,
            multi_image: false,
            debug_log: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(BackendError::InvalidConfig("timeout must be positive".into()));
        }
        if self.max_retries > 10 {
            return Err(BackendError::InvalidConfig("max_retries must be at most 10".into()));
        }
        if self.retry_backoff_base_secs < 0.0 {
            return Err(BackendError::InvalidConfig("retry backoff must be non-negative".into()));
        }
        Ok(())
    }
}

pub struct OpenAiBackend {
    id: String,
    config: BackendConfig,
    agent: ureq::Agent,
    log_guard: Mutex<()>,
}

impl OpenAiBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let id = if config.model_name.is_empty() {
            config.endpoint_url.clone()
        } else {
            config.model_name.clone()
        };
        Ok(Self { id, config, agent, log_guard: Mutex::new(()) })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Request body in chat-completions shape.
    pub fn request_body(&self, request: &PromptRequest) -> Result<Value, BackendError> {
        let mut content = Vec::new();
        if self.config.multi_image {
            for example in &request.support_examples {
                content.push(encode_image_payload(&example.image.bytes, &example.image.mime_type)?);
                content.push(json!({ "type": "text", "text": example.label }));
            }
        }
        for image in &request.images {
            content.push(encode_image_payload(&image.bytes, &image.mime_type)?);
        }
        content.push(json!({ "type": "text", "text": request.user_text }));

        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(json!({ "role": "system", "content": request.system_text }));
        }
        messages.push(json!({ "role": "user", "content": content }));

        Ok(json!({
            "model": self.config.model_name,
            "messages": messages,
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
            "stream": false,
        }))
    }

    fn attempt(&self, body: &Value) -> Result<(u16, String), BackendError> {
        let mut req = self.agent.post(&self.config.endpoint_url).header("Content-Type", "application/json");
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            if !key.is_empty() {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
        }
        let mut resp = req.send_json(body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_transport)?;
        Ok((status, text))
    }

    fn mirror(&self, body: &Value, outcome: &str) {
        let Some(path) = &self.config.debug_log else { return };
        let line = json!({ "request": elide_images(body), "response": outcome });
        let _guard = self.log_guard.lock();
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
            let _ = writeln!(f, "{line}");
        }
    }
}

fn map_transport(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        other => BackendError::Transport(other.to_string()),
    }
}

fn is_retryable(err: &BackendError) -> bool {
    match err {
        BackendError::Timeout | BackendError::Transport(_) => true,
        BackendError::Api { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

/// Replaces data URLs in a request body with a byte-count placeholder.
pub fn elide_images(body: &Value) -> Value {
    match body {
        Value::String(s) if s.starts_with("data:") => {
            Value::String(format!("<image elided, {} chars>", s.len()))
        }
        Value::Array(items) => Value::Array(items.iter().map(elide_images).collect()),
        Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), elide_images(v))).collect()),
        other => other.clone(),
    }
}

fn parse_completion(text: &str) -> Result<(String, Option<(u64, u64)>), BackendError> {
    let v: Value = serde_json::from_str(text).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let content = &v["choices"][0]["message"]["content"];
    let out = match content {
        Value::String(s) => s.clone(),
        // some servers return content as an array of text parts
        Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""),
        Value::Null => String::new(),
        other => return Err(BackendError::MalformedResponse(format!("unexpected content {other}"))),
    };
    let usage = match (v["usage"]["prompt_tokens"].as_u64(), v["usage"]["completion_tokens"].as_u64()) {
        (Some(i), Some(o)) => Some((i, o)),
        _ => None,
    };
    Ok((out, usage))
}

impl Backend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports_multi_image(&self) -> bool {
        self.config.multi_image
    }

    fn complete(&self, request: &PromptRequest) -> Result<ModelResponse, BackendError> {
        let body = self.request_body(request)?;
        let started = Instant::now();
        let mut retries = 0u32;
        loop {
            let result = self.attempt(&body).and_then(|(status, text)| {
                if (200..300).contains(&status) {
                    Ok(text)
                } else {
                    Err(BackendError::Api { status, body: text })
                }
            });
            match result {
                Ok(text) => {
                    self.mirror(&body, &text);
                    let (content, token_counts) = parse_completion(&text)?;
                    return Ok(ModelResponse {
                        text: content,
                        latency: started.elapsed().as_secs_f64(),
                        token_counts,
                        backend_id: self.id.clone(),
                        retries,
                    });
                }
                Err(err) => {
                    self.mirror(&body, &err.to_string());
                    if !is_retryable(&err) {
                        return Err(err);
                    }
                    if retries >= self.config.max_retries {
                        if self.config.max_retries == 0 {
                            return Err(err);
                        }
                        return Err(BackendError::RetriesExhausted {
                            attempts: retries + 1,
                            last: err.to_string(),
                        });
                    }
                    let backoff = self.config.retry_backoff_base_secs * 2f64.powi(retries as i32);
                    std::thread::sleep(Duration::from_secs_f64(backoff));
                    retries += 1;
                }
            }
        }
    }
}
