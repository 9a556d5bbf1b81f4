use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::mock::{MockBackend, MockRules};
use super::openai::OpenAiBackend;
use super::{ChatRequest, FinishReason, LlmError, Usage};

/// What a backend returns for one successful chat call.
#[derive(Debug, Clone, PartialEq)]
pub struct WireReply {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

impl WireReply {
    pub fn stop(text: impl Into<String>) -> Self {
        WireReply {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            usage: Usage::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireError {
    Status { status: u16, body: String },
    Timeout,
    Connection(String),
    Invalid(String),
    /// The backend refuses to make calls (replay mode).
    Refused,
    Unsupported(&'static str),
}

impl WireError {
    pub fn is_retryable(&self) -> bool {
        match self {
            WireError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            WireError::Timeout | WireError::Connection(_) => true,
            _ => false,
        }
    }
}

/// One transport for chat completions and embeddings.
pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> &'static str;

    fn chat(&self, req: &ChatRequest) -> Result<WireReply, WireError>;

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, WireError>;
}

/// Backend section of a suite config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Registry name: `openai`, `mock` or `replay`.
    pub backend: String,
    /// Logical endpoint identity; part of every cache key.
    pub endpoint: Option<String>,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    /// Mock rules file (mock backend only).
    pub rules: Option<PathBuf>,
    pub embedding_model: Option<String>,
    pub parallelism: Option<usize>,
    pub max_prompt_chars: Option<usize>,
    pub retry_base_ms: Option<u64>,
}

impl BackendConfig {
    pub fn endpoint_id(&self) -> String {
        self.endpoint
            .clone()
            .or_else(|| self.base_url.clone())
            .unwrap_or_else(|| self.backend.clone())
    }
}

pub type BackendFactory = fn(&BackendConfig) -> Result<Box<dyn ChatBackend>, LlmError>;

/// Name → constructor table for chat backends.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut reg = BackendRegistry {
            factories: BTreeMap::new(),
        };
        reg.register("openai", |cfg| {
            let base = cfg
                .base_url
                .clone()
                .ok_or_else(|| LlmError::InvalidRequest("openai backend needs base_url".into()))?;
            let key_var = cfg.api_key_env.as_deref().unwrap_or(OpenAiBackend::API_KEY_ENV);
            let api_key = std::env::var(key_var).ok();
            let timeout = Duration::from_secs(cfg.timeout_secs.unwrap_or(120));
            Ok(Box::new(OpenAiBackend::new(base, api_key, timeout)))
        });
        reg.register("mock", |cfg| {
            let rules = match &cfg.rules {
                Some(path) => MockRules::load(path)?,
                None => MockRules::default(),
            };
            Ok(Box::new(MockBackend::from_rules(rules)))
        });
        reg.register("replay", |_| Ok(Box::new(ReplayBackend)));
        reg
    }
}

impl BackendRegistry {
    pub fn register(&mut self, name: &str, factory: BackendFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, cfg: &BackendConfig) -> Result<Box<dyn ChatBackend>, LlmError> {
        let factory = self.factories.get(&cfg.backend).ok_or_else(|| {
            LlmError::InvalidRequest(format!(
                "unknown backend {:?} (known: {})",
                cfg.backend,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(cfg)
    }
}

/// Serves only from the cache; every miss is an error.
pub struct ReplayBackend;

impl ChatBackend for ReplayBackend {
    fn kind(&self) -> &'static str {
        "replay"
    }

    fn chat(&self, _req: &ChatRequest) -> Result<WireReply, WireError> {
        Err(WireError::Refused)
    }

    fn embed(&self, _model: &str, _texts: &[String]) -> Result<Vec<Vec<f64>>, WireError> {
        Err(WireError::Refused)
    }
}
