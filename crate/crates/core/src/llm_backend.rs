//! Backend abstraction: one trait over chat-style LLM endpoints, a
//! deterministic replay backend driven by recorded transcripts, a
//! scripted backend for tests, per-unit conversation memory, and the
//! format-retry driver.
//!
//! Every backend enforces the same window precondition before sending:
//! prompt estimate + retained memory + reserved output must fit the
//! profile's context window. Overflow is the segmenter's problem (shrink),
//! so it surfaces as a typed error instead of a failed request.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::prompts::{
    assemble_multipart, estimate_tokens, validate_response, Answer, FormatError, LlmResponsePart,
    PromptEnvelope,
};
use crate::segment::UnitId;

/// Give up on a response after this many consecutive format failures.
pub const DEFAULT_MAX_FORMAT_RETRIES: usize = 20;

/// How to call a live chat-completions-style HTTP endpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HttpConfig {
    /// Full URL of the completions endpoint.
    pub base_url: String,
    /// Model identifier placed into the request body.
    pub model: String,
    /// Environment variable holding the credential; never stored in
    /// config or transcripts.
    #[serde(default)]
    pub auth_env: Option<String>,
    /// Header the credential goes into.
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    /// Prefix prepended to the credential value ("Bearer " for OAuth-style
    /// APIs, "" for plain key headers).
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    /// JSON pointer to where the model id goes in the body.
    #[serde(default = "default_model_pointer")]
    pub model_pointer: String,
    /// JSON pointer to where the message array goes in the body.
    #[serde(default = "default_messages_pointer")]
    pub messages_pointer: String,
    /// JSON pointer for the output-token cap; omitted when `None`.
    #[serde(default = "default_max_tokens_pointer")]
    pub max_tokens_pointer: Option<String>,
    /// JSON pointer to the response text in the reply body.
    #[serde(default = "default_response_pointer")]
    pub response_pointer: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Transport retries (connection errors, 429, 5xx).
    #[serde(default = "default_transport_retries")]
    pub max_retries: usize,
    /// Base backoff between transport retries; doubles each attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_auth_header() -> String {
    "Authorization".to_string()
}
fn default_auth_prefix() -> String {
    "Bearer ".to_string()
}
fn default_model_pointer() -> String {
    "/model".to_string()
}
fn default_messages_pointer() -> String {
    "/messages".to_string()
}
fn default_max_tokens_pointer() -> Option<String> {
    Some("/max_tokens".to_string())
}
fn default_response_pointer() -> String {
    "/choices/0/message/content".to_string()
}
fn default_timeout_secs() -> u64 {
    300
}
fn default_transport_retries() -> usize {
    3
}
fn default_backoff_ms() -> u64 {
    1_000
}

/// Size and transport parameters of one LLM target.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackendProfile {
    pub name: String,
    /// Total context window, in tokens.
    pub context_window: usize,
    /// Largest single response the model can produce; reserved out of the
    /// window before any prompt is built.
    pub output_limit: usize,
    /// Endpoint configuration; absent for replay/scripted profiles.
    #[serde(default)]
    pub http: Option<HttpConfig>,
}

impl BackendProfile {
    pub fn sized(name: &str, context_window: usize, output_limit: usize) -> Self {
        assert!(context_window > 0, "context window must be positive");
        assert!(
            output_limit <= context_window,
            "output limit cannot exceed the window"
        );
        BackendProfile {
            name: name.to_string(),
            context_window,
            output_limit,
            http: None,
        }
    }
}

/// The four well-known size profiles, by common model name. Endpoint
/// details still come from configuration; these pin the window arithmetic.
pub fn builtin_profiles() -> Vec<BackendProfile> {
    vec![
        BackendProfile::sized("gpt-4o", 128_000, 4_096),
        BackendProfile::sized("claude-3.5-sonnet", 200_000, 8_192),
        BackendProfile::sized("gemini-1.5-pro", 2_000_000, 8_192),
        BackendProfile::sized("llama-3-70b-instruct", 8_000, 2_048),
    ]
}

pub fn builtin_profile(name: &str) -> Option<BackendProfile> {
    builtin_profiles().into_iter().find(|p| p.name == name)
}

/// One prompt/response exchange retained in memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Turn {
    pub prompt_digest: String,
    pub prompt_text: String,
    pub response_text: String,
}

/// Conversation history for one unit's translate/repair exchanges.
/// Never crosses a unit boundary: the orchestrator persists and discards
/// it when the unit finishes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversationMemory {
    pub unit: UnitId,
    pub turns: Vec<Turn>,
    pub est_tokens_total: usize,
}

impl ConversationMemory {
    pub fn fresh(unit: UnitId) -> Self {
        ConversationMemory {
            unit,
            turns: Vec::new(),
            est_tokens_total: 0,
        }
    }

    pub fn push_turn(&mut self, envelope: &PromptEnvelope, response_text: &str) {
        self.est_tokens_total += envelope.est_tokens + estimate_tokens(response_text);
        self.turns.push(Turn {
            prompt_digest: envelope.digest(),
            prompt_text: envelope.text.clone(),
            response_text: response_text.to_string(),
        });
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("unit {unit}: prompt ({est} tokens) + memory ({memory}) + reserved output ({reserved}) exceed the {window}-token window")]
    ContextOverflow {
        unit: String,
        est: usize,
        memory: usize,
        reserved: usize,
        window: usize,
    },
    #[error("transport failure talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("credential environment variable {env} is not set")]
    MissingCredentials { env: String },
    #[error("no recorded response for prompt digest {digest} (nearest recorded: {nearest})")]
    ReplayMiss { digest: String, nearest: String },
    #[error("unit {unit}: giving up after {attempts} response format failures: {last_error}")]
    GiveUp {
        unit: String,
        attempts: usize,
        last_error: String,
    },
    #[error("transcript I/O in {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// A chat-style LLM endpoint (live, scripted, or replayed).
pub trait Backend {
    fn profile(&self) -> &BackendProfile;

    /// Send one prompt, with `memory` as prior conversation history.
    /// Implementations must call [`check_window`] first.
    fn send(
        &mut self,
        envelope: &PromptEnvelope,
        memory: &ConversationMemory,
    ) -> Result<Vec<LlmResponsePart>, BackendError>;
}

/// The shared window precondition.
pub fn check_window(
    profile: &BackendProfile,
    envelope: &PromptEnvelope,
    memory: &ConversationMemory,
) -> Result<(), BackendError> {
    let needed = envelope.est_tokens + memory.est_tokens_total + profile.output_limit;
    if needed > profile.context_window {
        return Err(BackendError::ContextOverflow {
            unit: envelope.unit.to_string(),
            est: envelope.est_tokens,
            memory: memory.est_tokens_total,
            reserved: profile.output_limit,
            window: profile.context_window,
        });
    }
    Ok(())
}

/// Build the chat message array: alternating user/assistant turns from
/// memory, then the new prompt.
pub fn chat_messages(envelope: &PromptEnvelope, memory: &ConversationMemory) -> serde_json::Value {
    let mut messages = Vec::with_capacity(memory.turns.len() * 2 + 1);
    for turn in &memory.turns {
        messages.push(serde_json::json!({"role": "user", "content": turn.prompt_text}));
        messages.push(serde_json::json!({"role": "assistant", "content": turn.response_text}));
    }
    messages.push(serde_json::json!({"role": "user", "content": envelope.text}));
    serde_json::Value::Array(messages)
}

/// Build the request body for `config` from the profile and messages.
pub fn http_body(
    config: &HttpConfig,
    profile: &BackendProfile,
    messages: serde_json::Value,
) -> serde_json::Value {
    let mut body = serde_json::json!({});
    set_pointer(&mut body, &config.model_pointer, serde_json::json!(config.model));
    set_pointer(&mut body, &config.messages_pointer, messages);
    if let Some(ptr) = &config.max_tokens_pointer {
        set_pointer(&mut body, ptr, serde_json::json!(profile.output_limit));
    }
    body
}

/// Write `value` at `pointer`, creating intermediate objects. Only object
/// keys are created (array indices must already exist).
fn set_pointer(doc: &mut serde_json::Value, pointer: &str, value: serde_json::Value) {
    let mut cursor = doc;
    let parts: Vec<&str> = pointer.trim_start_matches('/').split('/').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if !cursor.is_object() {
            *cursor = serde_json::json!({});
        }
        let map = cursor.as_object_mut().expect("object ensured");
        if last {
            map.insert(part.to_string(), value);
            return;
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
}

/// Pull the response text out of a reply body.
pub fn extract_response_text(
    body: &serde_json::Value,
    pointer: &str,
) -> Result<String, FormatError> {
    body.pointer(pointer)
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| {
            FormatError::new(format!("reply body has no string at JSON pointer {pointer}"))
        })
}

/// Live HTTP backend over a chat-completions-style endpoint.
pub struct HttpBackend {
    profile: BackendProfile,
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(profile: BackendProfile) -> Result<Self, BackendError> {
        let config = profile.http.clone().ok_or_else(|| BackendError::Transport {
            endpoint: profile.name.clone(),
            message: "profile has no HTTP endpoint configuration".to_string(),
        })?;
        if let Some(env) = &config.auth_env {
            if std::env::var(env).is_err() {
                return Err(BackendError::MissingCredentials { env: env.clone() });
            }
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport {
                endpoint: config.base_url.clone(),
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            profile,
            config,
            client,
        })
    }
}

impl Backend for HttpBackend {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn send(
        &mut self,
        envelope: &PromptEnvelope,
        memory: &ConversationMemory,
    ) -> Result<Vec<LlmResponsePart>, BackendError> {
        check_window(&self.profile, envelope, memory)?;
        let body = http_body(&self.config, &self.profile, chat_messages(envelope, memory));
        let mut last_err = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.config.backoff_ms << (attempt - 1).min(6),
                ));
            }
            let mut request = self.client.post(&self.config.base_url).json(&body);
            if let Some(env) = &self.config.auth_env {
                let key = std::env::var(env)
                    .map_err(|_| BackendError::MissingCredentials { env: env.clone() })?;
                request = request.header(
                    self.config.auth_header.as_str(),
                    format!("{}{key}", self.config.auth_prefix),
                );
            }
            match request.send() {
                Err(e) => last_err = e.to_string(),
                Ok(resp) => {
                    let status = resp.status();
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_err = format!("HTTP {status}");
                        continue;
                    }
                    if !status.is_success() {
                        let text = resp.text().unwrap_or_default();
                        return Err(BackendError::Transport {
                            endpoint: self.config.base_url.clone(),
                            message: format!("HTTP {status}: {text}"),
                        });
                    }
                    let reply: serde_json::Value =
                        resp.json().map_err(|e| BackendError::Transport {
                            endpoint: self.config.base_url.clone(),
                            message: format!("undecodable reply body: {e}"),
                        })?;
                    let text = extract_response_text(&reply, &self.config.response_pointer)
                        .map_err(|e| BackendError::Transport {
                            endpoint: self.config.base_url.clone(),
                            message: e.to_string(),
                        })?;
                    return Ok(LlmResponsePart::single(&text));
                }
            }
        }
        Err(BackendError::Transport {
            endpoint: self.config.base_url.clone(),
            message: format!(
                "giving up after {} attempts: {last_err}",
                self.config.max_retries + 1
            ),
        })
    }
}

/// One recorded exchange on disk: `<dir>/<seq>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: usize,
    pub unit: UnitId,
    pub schema_id: String,
    /// Digest of the prompt text; the replay key.
    pub digest: String,
    pub prompt_text: String,
    pub parts: Vec<LlmResponsePart>,
}

/// Append-only writer for `<out>/transcript/`.
pub struct TranscriptWriter {
    dir: PathBuf,
    seq: usize,
}

impl TranscriptWriter {
    pub fn create(dir: &Path) -> Result<Self, BackendError> {
        fs::create_dir_all(dir).map_err(|source| BackendError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(TranscriptWriter {
            dir: dir.to_path_buf(),
            seq: 0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Record one exchange; returns the sequence number used.
    pub fn record(
        &mut self,
        envelope: &PromptEnvelope,
        parts: &[LlmResponsePart],
    ) -> Result<usize, BackendError> {
        self.seq += 1;
        let entry = TranscriptEntry {
            seq: self.seq,
            unit: envelope.unit.clone(),
            schema_id: envelope.schema_id.clone(),
            digest: envelope.digest(),
            prompt_text: envelope.text.clone(),
            parts: parts.to_vec(),
        };
        let path = self.dir.join(format!("{:04}.json", self.seq));
        let mut text = serde_json::to_string_pretty(&entry).expect("entry serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|source| BackendError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(self.seq)
    }

    /// Persist a unit's finished conversation memory alongside the
    /// transcript before it is cleared.
    pub fn record_memory(&self, memory: &ConversationMemory) -> Result<(), BackendError> {
        let path = self.dir.join(format!("memory.{}.json", memory.unit));
        let mut text = serde_json::to_string_pretty(memory).expect("memory serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|source| BackendError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Persist the profile so replays of this transcript use identical
    /// window arithmetic.
    pub fn record_profile(&self, profile: &BackendProfile) -> Result<(), BackendError> {
        let path = self.dir.join("profile.json");
        let mut text = serde_json::to_string_pretty(profile).expect("profile serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|source| BackendError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Deterministic backend answering from a recorded transcript directory,
/// keyed by prompt digest. Repeated identical prompts consume recorded
/// entries in order, then stick on the last one.
#[derive(Debug)]
pub struct ReplayBackend {
    profile: BackendProfile,
    responses: BTreeMap<String, VecDeque<Vec<LlmResponsePart>>>,
    exhausted_last: BTreeMap<String, Vec<LlmResponsePart>>,
}

impl ReplayBackend {
    /// Load a transcript directory. The profile comes from the recorded
    /// `profile.json`, or `fallback` when none was recorded.
    pub fn load(dir: &Path, fallback: Option<BackendProfile>) -> Result<Self, BackendError> {
        let io_err = |source: io::Error| BackendError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut entries: Vec<TranscriptEntry> = Vec::new();
        let mut profile = fallback;
        let mut names: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        names.sort();
        for path in names {
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if name == "profile.json" {
                let text = fs::read_to_string(&path).map_err(io_err)?;
                profile = Some(serde_json::from_str(&text).map_err(|e| BackendError::Io {
                    path: path.display().to_string(),
                    source: io::Error::new(io::ErrorKind::InvalidData, e),
                })?);
                continue;
            }
            if !name.ends_with(".json") || name.starts_with("memory.") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(io_err)?;
            let entry: TranscriptEntry =
                serde_json::from_str(&text).map_err(|e| BackendError::Io {
                    path: path.display().to_string(),
                    source: io::Error::new(io::ErrorKind::InvalidData, e),
                })?;
            entries.push(entry);
        }
        entries.sort_by_key(|e| e.seq);
        let mut responses: BTreeMap<String, VecDeque<Vec<LlmResponsePart>>> = BTreeMap::new();
        for entry in entries {
            responses.entry(entry.digest).or_default().push_back(entry.parts);
        }
        let profile = profile.ok_or_else(|| BackendError::Io {
            path: dir.display().to_string(),
            source: io::Error::new(
                io::ErrorKind::NotFound,
                "no profile.json in transcript dir and no fallback profile given",
            ),
        })?;
        Ok(ReplayBackend {
            profile,
            responses,
            exhausted_last: BTreeMap::new(),
        })
    }

    fn nearest_digest(&self, digest: &str) -> String {
        let common = |a: &str, b: &str| a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count();
        self.responses
            .keys()
            .chain(self.exhausted_last.keys())
            .max_by_key(|k| common(k, digest))
            .cloned()
            .unwrap_or_else(|| "<empty transcript>".to_string())
    }
}

impl Backend for ReplayBackend {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn send(
        &mut self,
        envelope: &PromptEnvelope,
        memory: &ConversationMemory,
    ) -> Result<Vec<LlmResponsePart>, BackendError> {
        check_window(&self.profile, envelope, memory)?;
        let digest = envelope.digest();
        if let Some(queue) = self.responses.get_mut(&digest) {
            if let Some(parts) = queue.pop_front() {
                if queue.is_empty() {
                    self.responses.remove(&digest);
                }
                self.exhausted_last.insert(digest, parts.clone());
                return Ok(parts);
            }
        }
        if let Some(parts) = self.exhausted_last.get(&digest) {
            return Ok(parts.clone());
        }
        Err(BackendError::ReplayMiss {
            nearest: self.nearest_digest(&digest),
            digest,
        })
    }
}

/// Test backend: a closure inspects each envelope and fabricates the
/// response parts.
pub struct ScriptedBackend<F>
where
    F: FnMut(&PromptEnvelope) -> Result<Vec<LlmResponsePart>, BackendError>,
{
    profile: BackendProfile,
    script: F,
}

impl<F> ScriptedBackend<F>
where
    F: FnMut(&PromptEnvelope) -> Result<Vec<LlmResponsePart>, BackendError>,
{
    pub fn new(profile: BackendProfile, script: F) -> Self {
        ScriptedBackend { profile, script }
    }
}

impl<F> Backend for ScriptedBackend<F>
where
    F: FnMut(&PromptEnvelope) -> Result<Vec<LlmResponsePart>, BackendError>,
{
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn send(
        &mut self,
        envelope: &PromptEnvelope,
        memory: &ConversationMemory,
    ) -> Result<Vec<LlmResponsePart>, BackendError> {
        check_window(&self.profile, envelope, memory)?;
        (self.script)(envelope)
    }
}

/// Append the corrective instruction for a failed response format.
pub fn with_correction(envelope: &PromptEnvelope, error: &FormatError) -> PromptEnvelope {
    let mut fixed = envelope.clone();
    fixed.text.push_str(&format!(
        "\n\nYour previous response could not be used ({}). Rewrite the entire response as valid \
         JSON of the required shape, with correct escape handling. If the response is long, \
         respond in chunks of 100 lines.",
        error.reason
    ));
    fixed.est_tokens = estimate_tokens(&fixed.text);
    fixed
}

/// One exchange: send, record, and parse. The outer `Result` carries
/// backend failures (fatal to the caller); the inner one separates a usable
/// answer from a format problem the caller may retry.
pub fn send_once(
    backend: &mut dyn Backend,
    envelope: &PromptEnvelope,
    memory: &mut ConversationMemory,
    observe: &mut dyn FnMut(&PromptEnvelope, &[LlmResponsePart]),
) -> Result<Result<Answer, FormatError>, BackendError> {
    let parts = backend.send(envelope, memory)?;
    observe(envelope, &parts);
    let response_text: String = parts
        .iter()
        .map(|p| p.payload_fragment.as_str())
        .collect();
    memory.push_turn(envelope, &response_text);
    Ok(assemble_multipart(&parts).and_then(|doc| validate_response(&envelope.schema_id, doc)))
}

/// Send an envelope and validate the response, retrying with corrective
/// instructions on format failures. Every exchange (good or bad) is
/// appended to `memory` and offered to `observe` (the transcript hook).
pub fn send_validated(
    backend: &mut dyn Backend,
    envelope: &PromptEnvelope,
    memory: &mut ConversationMemory,
    max_format_retries: usize,
    observe: &mut dyn FnMut(&PromptEnvelope, &[LlmResponsePart]),
) -> Result<Answer, BackendError> {
    let mut current = envelope.clone();
    let mut last_error = FormatError::new("no attempt made");
    for attempt in 1..=max_format_retries.max(1) {
        match send_once(backend, &current, memory, observe)? {
            Ok(answer) => return Ok(answer),
            Err(err) => {
                last_error = err;
                if attempt < max_format_retries {
                    current = with_correction(envelope, &last_error);
                }
            }
        }
    }
    Err(BackendError::GiveUp {
        unit: envelope.unit.to_string(),
        attempts: max_format_retries.max(1),
        last_error: last_error.to_string(),
    })
}
