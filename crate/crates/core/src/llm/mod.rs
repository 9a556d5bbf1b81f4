//! Chat-completion and embedding access with a content-addressed cache.
//!
//! [`LlmClient`] owns the cache, the retry policy and in-flight
//! de-duplication; the actual transport is a [`ChatBackend`] picked by name
//! from a [`BackendRegistry`] (`openai`, `mock`, `replay`).

mod backend;
mod cache;
mod client;
pub mod mock;
mod openai;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use backend::{BackendConfig, BackendFactory, BackendRegistry, ChatBackend, ReplayBackend, WireError, WireReply};
pub use cache::{CacheEntry, ResponseCache};
pub use client::{CallKind, CallRecord, ClientStats, LlmClient, LlmClientBuilder, RetryPolicy, DEFAULT_EMBEDDING_MODEL};
pub use openai::OpenAiBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl ChatRequest {
    /// Single user-turn request.
    pub fn prompt(model: &str, prompt: String, decoding: Decoding) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![Message::user(prompt)],
            temperature: decoding.temperature,
            max_tokens: decoding.max_tokens,
            stop: None,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| LlmError::InvalidRequest("no messages".into()))?;
        if first.role == Role::Assistant {
            return Err(LlmError::InvalidRequest(
                "first message must be system or user".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn prompt_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }
}

/// Sampling parameters. Greedy decoding by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Decoding {
    pub const CLASSIFICATION: Decoding = Decoding {
        temperature: 0.0,
        max_tokens: 256,
    };
    pub const NLE_GENERATION: Decoding = Decoding {
        temperature: 0.0,
        max_tokens: 512,
    };
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding::CLASSIFICATION
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    pub cached: bool,
}

/// SHA-256 over the canonical JSON of (endpoint, route, payload).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl CacheKey {
    pub fn for_chat(endpoint: &str, req: &ChatRequest) -> Self {
        #[derive(Serialize)]
        struct Canonical<'a> {
            endpoint: &'a str,
            route: &'a str,
            request: &'a ChatRequest,
        }
        Self::digest(&Canonical {
            endpoint,
            route: "chat",
            request: req,
        })
    }

    pub fn for_embedding(endpoint: &str, model: &str, text: &str) -> Self {
        #[derive(Serialize)]
        struct Canonical<'a> {
            endpoint: &'a str,
            route: &'a str,
            model: &'a str,
            text: &'a str,
        }
        Self::digest(&Canonical {
            endpoint,
            route: "embeddings",
            model,
            text,
        })
    }

    fn digest<T: Serialize>(value: &T) -> Self {
        let bytes = serde_json::to_vec(value).expect("canonical form serializes");
        CacheKey(Sha256::digest(&bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(CacheKey(out))
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for CacheKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for CacheKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CacheKey::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad cache key"))
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure (status {status}): {body}")]
    Transport { status: u16, body: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prompt has {chars} characters, limit is {limit}")]
    PromptTooLong { chars: usize, limit: usize },
    #[error("no recorded response for request {0}")]
    ReplayMiss(CacheKey),
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("cache: {0}")]
    Cache(String),
}
