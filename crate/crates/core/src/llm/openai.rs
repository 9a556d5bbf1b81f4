//! OpenAI-compatible `/chat/completions` and `/embeddings` over blocking HTTP.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::backend::{ChatBackend, WireError, WireReply};
use super::{ChatRequest, FinishReason, Usage};

pub struct OpenAiBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

#[derive(Deserialize)]
struct EmbeddingList {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

impl OpenAiBackend {
    pub const API_KEY_ENV: &'static str = "XICL_API_KEY";

    pub fn new(base_url: String, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        OpenAiBackend {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
        }
    }

    fn post(&self, route: &str, body: serde_json::Value) -> Result<String, WireError> {
        let url = format!("{}/{}", self.base_url, route);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => WireError::Timeout,
            other => WireError::Connection(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| WireError::Connection(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(WireError::Status { status, body: text });
        }
        Ok(text)
    }
}

impl ChatBackend for OpenAiBackend {
    fn kind(&self) -> &'static str {
        "openai"
    }

    fn chat(&self, req: &ChatRequest) -> Result<WireReply, WireError> {
        let mut body = json!({
            "model": req.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(stop) = &req.stop {
            body["stop"] = json!(stop);
        }
        let raw = self.post("chat/completions", body)?;
        let parsed: ChatCompletion =
            serde_json::from_str(&raw).map_err(|e| WireError::Invalid(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| WireError::Invalid("no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Other,
        };
        let usage = parsed
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(WireReply {
            text: choice.message.content.unwrap_or_default(),
            finish_reason,
            usage,
        })
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, WireError> {
        let raw = self.post("embeddings", json!({ "model": model, "input": texts }))?;
        let mut parsed: EmbeddingList =
            serde_json::from_str(&raw).map_err(|e| WireError::Invalid(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(WireError::Invalid(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}
