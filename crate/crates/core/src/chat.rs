//! Pluggable chat-completion backends.
//!
//! A [`ChatBackend`] is stateless between calls: every request carries the
//! full system prompt and message list, which is what makes the per-round
//! memory scoping of the orchestrator enforceable. Implementations here:
//! an HTTP chat-completions client, a scripted mock replaying canned
//! completions, and a recording wrapper for request-capture tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed completion payload: {0}")]
    MalformedResponse(String),
    #[error("script has no completions for role {0:?}")]
    ScriptMissingRole(String),
    #[error("script file error: {0}")]
    Script(String),
    #[error("environment variable {0} is not set")]
    MissingToken(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

/// A synchronous chat-completion endpoint. Implementations must be safe to
/// call concurrently from independent sessions.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, system_prompt: &str, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

/// The LLM roles the engine issues requests for; used to pick completions
/// from script files and to label recorded requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Radiologist,
    Reviewer,
    Judge,
    Cleaner,
    Flagger,
}

impl AgentRole {
    pub fn key(self) -> &'static str {
        match self {
            AgentRole::Radiologist => "radiologist",
            AgentRole::Reviewer => "reviewer",
            AgentRole::Judge => "judge",
            AgentRole::Cleaner => "cleaner",
            AgentRole::Flagger => "flagger",
        }
    }
}

/// Hands out per-case backends. Scripted providers return a fresh cursor
/// for every case so batch results are independent of scheduling order;
/// HTTP providers return the same shared client.
pub trait BackendProvider: Send + Sync {
    fn backend(&self, case_id: &str, role: AgentRole) -> Result<Arc<dyn ChatBackend>, BackendError>;
}

// ---------------------------------------------------------------------------
// Scripted mock
// ---------------------------------------------------------------------------

/// Ordered canned completions per agent role, loaded from a JSON object
/// like `{"radiologist": ["..."], "reviewer": ["..."]}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(flatten)]
    pub roles: BTreeMap<String, Vec<String>>,
}

impl Script {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn completions(&self, role: AgentRole) -> Result<&[String], BackendError> {
        match self.roles.get(role.key()) {
            Some(list) if !list.is_empty() => Ok(list),
            _ => Err(BackendError::ScriptMissingRole(role.key().to_string())),
        }
    }
}

/// Replays a fixed list of completions in order, cycling when exhausted.
/// The cursor is local to this instance, so one instance per session keeps
/// replay deterministic under concurrency.
pub struct ScriptedBackend {
    completions: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(completions: Vec<String>) -> Self {
        Self { completions, cursor: Mutex::new(0) }
    }

    pub fn from_strs(completions: &[&str]) -> Self {
        Self::new(completions.iter().map(|s| s.to_string()).collect())
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, _system: &str, _messages: &[ChatMessage]) -> Result<String, BackendError> {
        if self.completions.is_empty() {
            return Err(BackendError::ScriptMissingRole("<unnamed>".into()));
        }
        let mut cursor = self.cursor.lock().expect("cursor poisoned");
        let text = self.completions[*cursor % self.completions.len()].clone();
        *cursor += 1;
        Ok(text)
    }
}

/// Provider that replays a [`Script`], resetting every role cursor at the
/// start of each case.
pub struct ScriptedProvider {
    script: Arc<Script>,
}

impl ScriptedProvider {
    pub fn new(script: Script) -> Self {
        Self { script: Arc::new(script) }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        Ok(Self::new(Script::load(path)?))
    }
}

impl BackendProvider for ScriptedProvider {
    fn backend(&self, _case_id: &str, role: AgentRole) -> Result<Arc<dyn ChatBackend>, BackendError> {
        let completions = self.script.completions(role)?.to_vec();
        Ok(Arc::new(ScriptedBackend::new(completions)))
    }
}

// ---------------------------------------------------------------------------
// Recording wrapper
// ---------------------------------------------------------------------------

/// One captured request, with enough context to assert on prompt contents.
#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub case_id: String,
    pub role: AgentRole,
    pub call_index: usize,
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
}

impl RecordedRequest {
    /// All user/assistant content joined, for substring assertions.
    pub fn joined_content(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

type RequestLog = Arc<Mutex<Vec<RecordedRequest>>>;

/// Wraps another provider and captures every request made through it.
pub struct RecordingProvider<P> {
    inner: P,
    log: RequestLog,
}

impl<P: BackendProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, log: Arc::new(Mutex::new(Vec::new())) }
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().expect("log poisoned").clone()
    }
}

impl<P: BackendProvider> BackendProvider for RecordingProvider<P> {
    fn backend(&self, case_id: &str, role: AgentRole) -> Result<Arc<dyn ChatBackend>, BackendError> {
        let inner = self.inner.backend(case_id, role)?;
        Ok(Arc::new(RecordingBackend {
            inner,
            case_id: case_id.to_string(),
            role,
            log: Arc::clone(&self.log),
        }))
    }
}

struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    case_id: String,
    role: AgentRole,
    log: RequestLog,
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, system_prompt: &str, messages: &[ChatMessage]) -> Result<String, BackendError> {
        {
            let mut log = self.log.lock().expect("log poisoned");
            let call_index = log.iter().filter(|r| r.case_id == self.case_id && r.role == self.role).count();
            log.push(RecordedRequest {
                case_id: self.case_id.clone(),
                role: self.role,
                call_index,
                system_prompt: system_prompt.to_string(),
                messages: messages.to_vec(),
            });
        }
        self.inner.complete(system_prompt, messages)
    }
}

// ---------------------------------------------------------------------------
// HTTP chat-completions client
// ---------------------------------------------------------------------------

/// Connection settings for a chat-completions style endpoint. The bearer
/// token is read from `token_env_var` at construction time, never stored
/// in config files.
#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model_id: String,
    pub token_env_var: Option<String>,
    pub timeout_s: u64,
    pub retries: u32,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            model_id: String::new(),
            token_env_var: None,
            timeout_s: 60,
            retries: 2,
        }
    }
}

#[derive(Debug)]
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    url: String,
    model_id: String,
    token: Option<String>,
    retries: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireCompletion {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

impl HttpChatBackend {
    pub fn new(config: &HttpBackendConfig) -> Result<Self, BackendError> {
        if config.base_url.is_empty() {
            return Err(BackendError::Config("base_url is empty".into()));
        }
        let token = match &config.token_env_var {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| BackendError::MissingToken(var.clone()))?)
            }
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model_id: config.model_id.clone(),
            token,
            retries: config.retries,
        })
    }

    fn request_once(&self, body: &serde_json::Value) -> Result<String, BackendError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        let parsed: WireCompletion = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        // Only the first choice is read.
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::MalformedResponse("no choices in completion".into()))
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, system_prompt: &str, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let mut wire: Vec<WireMessage> =
            vec![WireMessage { role: "system", content: system_prompt }];
        wire.extend(messages.iter().map(|m| WireMessage {
            role: match m.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            },
            content: &m.content,
        }));
        let body = serde_json::json!({ "model": self.model_id, "messages": wire });

        // Retry transport failures only; malformed content is never retried.
        let mut last = None;
        for _ in 0..=self.retries {
            match self.request_once(&body) {
                Err(BackendError::Transport(e)) => last = Some(BackendError::Transport(e)),
                other => return other,
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
