//! TOML engine configuration: backends, embedder, retrieval and session
//! knobs, and pipeline paths.
//!
//! Missing fields take defaults (mock embedder, k=10, max_rounds=3,
//! retries=2). Secrets are named by environment variable only and read at
//! backend construction, never at load time and never from files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{
    BackendError, BackendProvider, HttpBackendConfig, HttpChatBackend, ScriptedProvider,
};
use crate::orchestrator::SessionConfig;
use crate::retrieval::{EmbeddingBackend, HashedBowEmbedder, RemoteEmbedder, RetrievalConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("invalid config field {0}: {1}")]
    Invalid(&'static str, String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// One chat backend slot: an HTTP endpoint or a scripted mock.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    /// No backend configured; commands that need one will fail at
    /// construction time.
    #[default]
    None,
    Http {
        base_url: String,
        model_id: String,
        #[serde(default)]
        token_env_var: Option<String>,
        #[serde(default = "default_timeout_s")]
        timeout_s: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
    Scripted { script: PathBuf },
}

fn default_timeout_s() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub token_env_var: Option<String>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_dim() -> usize {
    64
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Mock,
            base_url: None,
            model_id: None,
            token_env_var: None,
            dim: 64,
            timeout_s: default_timeout_s(),
        }
    }
}

/// Overridable system prompt file paths; unset slots use the built-in
/// assets.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPaths {
    pub radiologist: Option<PathBuf>,
    pub reviewer: Option<PathBuf>,
    pub judge: Option<PathBuf>,
    pub cleaner: Option<PathBuf>,
    pub flagger: Option<PathBuf>,
}

/// Resolved system prompt texts.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub radiologist: String,
    pub reviewer: String,
    pub judge: String,
    pub cleaner: String,
    pub flagger: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            radiologist: crate::agents::radiologist_system_prompt().to_string(),
            reviewer: crate::agents::reviewer_system_prompt().to_string(),
            judge: crate::judge::judge_system_prompt().to_string(),
            cleaner: include_str!("../assets/cleaner_system.txt").to_string(),
            flagger: crate::inconsistency::flagger_system_prompt().to_string(),
        }
    }
}

impl PromptSet {
    pub fn from_paths(paths: &PromptPaths) -> Result<Self, ConfigError> {
        let mut prompts = Self::default();
        let read = |path: &PathBuf| {
            std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
                path: path.display().to_string(),
                reason: e.to_string(),
            })
        };
        if let Some(path) = &paths.radiologist {
            prompts.radiologist = read(path)?;
        }
        if let Some(path) = &paths.reviewer {
            prompts.reviewer = read(path)?;
        }
        if let Some(path) = &paths.judge {
            prompts.judge = read(path)?;
        }
        if let Some(path) = &paths.cleaner {
            prompts.cleaner = read(path)?;
        }
        if let Some(path) = &paths.flagger {
            prompts.flagger = read(path)?;
        }
        Ok(prompts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_n_eval() -> usize {
    100
}

fn default_seed() -> u64 {
    7
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { n_eval: 100, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default = "default_corpus_path")]
    pub corpus: PathBuf,
    #[serde(default = "default_index_path")]
    pub index: PathBuf,
    #[serde(default = "default_runs_path")]
    pub runs: PathBuf,
}

fn default_corpus_path() -> PathBuf {
    PathBuf::from("corpus.jsonl")
}

fn default_index_path() -> PathBuf {
    PathBuf::from("index.json")
}

fn default_runs_path() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: default_corpus_path(),
            index: default_index_path(),
            runs: default_runs_path(),
        }
    }
}

/// Boilerplate phrase list for the rule-based impression cleaner.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanerConfig {
    #[serde(default = "default_phrases")]
    pub phrases: Vec<String>,
}

fn default_phrases() -> Vec<String> {
    crate::report::DEFAULT_BOILERPLATE_PHRASES.iter().map(|s| s.to_string()).collect()
}

impl Default for CleanerConfig {
    fn default() -> Self {
        Self { phrases: default_phrases() }
    }
}

/// Full engine configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub agent_backend: BackendSpec,
    pub judge_backend: BackendSpec,
    pub embedder: EmbedderConfig,
    pub retrieval: RetrievalConfig,
    pub session: SessionConfig,
    pub split: SplitConfig,
    pub paths: PathsConfig,
    pub prompts: PromptPaths,
    pub cleaner: CleanerConfig,
}

/// Load and validate a TOML config; an empty file yields all defaults.
pub fn load_config(path: impl AsRef<Path>) -> Result<EngineConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let config: EngineConfig = toml::from_str(&text).map_err(|e| ConfigError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.retrieval.k == 0 {
            return Err(ConfigError::Invalid("retrieval.k", "must be >= 1".into()));
        }
        if self.session.k == 0 {
            return Err(ConfigError::Invalid("session.k", "must be >= 1".into()));
        }
        if self.session.max_rounds == 0 {
            return Err(ConfigError::Invalid("session.max_rounds", "must be >= 1".into()));
        }
        if self.embedder.dim == 0 {
            return Err(ConfigError::Invalid("embedder.dim", "must be >= 1".into()));
        }
        if self.split.n_eval == 0 {
            return Err(ConfigError::Invalid("split.n_eval", "must be >= 1".into()));
        }
        if let EmbedderKind::Remote = self.embedder.kind {
            if self.embedder.base_url.is_none() {
                return Err(ConfigError::Invalid("embedder.base_url", "required for remote".into()));
            }
        }
        Ok(())
    }

    pub fn prompt_set(&self) -> Result<PromptSet, ConfigError> {
        PromptSet::from_paths(&self.prompts)
    }

    pub fn embedder_backend(&self) -> Result<Arc<dyn EmbeddingBackend>, ConfigError> {
        match self.embedder.kind {
            EmbedderKind::Mock => Ok(Arc::new(HashedBowEmbedder::new(self.embedder.dim))),
            EmbedderKind::Remote => {
                let base_url = self.embedder.base_url.as_deref().unwrap_or_default();
                let model_id = self.embedder.model_id.as_deref().unwrap_or_default();
                let embedder = RemoteEmbedder::new(
                    base_url,
                    model_id,
                    self.embedder.token_env_var.as_deref(),
                    self.embedder.dim,
                    self.embedder.timeout_s,
                )
                .map_err(|e| ConfigError::Invalid("embedder", e.to_string()))?;
                Ok(Arc::new(embedder))
            }
        }
    }

    fn build_slot(spec: &BackendSpec, slot: &'static str) -> Result<RoleSlot, ConfigError> {
        match spec {
            BackendSpec::None => Ok(RoleSlot::None(slot)),
            BackendSpec::Http { base_url, model_id, token_env_var, timeout_s, retries } => {
                let backend = HttpChatBackend::new(&HttpBackendConfig {
                    base_url: base_url.clone(),
                    model_id: model_id.clone(),
                    token_env_var: token_env_var.clone(),
                    timeout_s: *timeout_s,
                    retries: *retries,
                })?;
                Ok(RoleSlot::Fixed(Arc::new(backend)))
            }
            BackendSpec::Scripted { script } => {
                Ok(RoleSlot::Scripted(Arc::new(ScriptedProvider::load(script)?)))
            }
        }
    }

    /// Build the provider behind agent and judge calls. Scripted slots
    /// replay per-case; HTTP slots share one client. Judge calls never
    /// fall back to the agent backend.
    pub fn backend_provider(&self) -> Result<Arc<dyn BackendProvider>, ConfigError> {
        Ok(Arc::new(ConfiguredProvider {
            agent: Self::build_slot(&self.agent_backend, "agent_backend")?,
            judge: Self::build_slot(&self.judge_backend, "judge_backend")?,
        }))
    }
}

enum RoleSlot {
    None(&'static str),
    Fixed(Arc<dyn crate::chat::ChatBackend>),
    Scripted(Arc<ScriptedProvider>),
}

struct ConfiguredProvider {
    agent: RoleSlot,
    judge: RoleSlot,
}

impl BackendProvider for ConfiguredProvider {
    fn backend(
        &self,
        case_id: &str,
        role: crate::chat::AgentRole,
    ) -> Result<Arc<dyn crate::chat::ChatBackend>, BackendError> {
        let slot = match role {
            crate::chat::AgentRole::Judge => &self.judge,
            _ => &self.agent,
        };
        match slot {
            RoleSlot::None(name) => Err(BackendError::Config(format!("no {name} configured"))),
            RoleSlot::Fixed(backend) => Ok(Arc::clone(backend)),
            RoleSlot::Scripted(provider) => provider.backend(case_id, role),
        }
    }
}
