//! Deterministic mock backend.
//!
//! Responses come from an ordered rule list (first match wins) loaded from a
//! TOML rules file, or from a closure in tests:
//!
//! ```toml
//! default_reply = "Label: neutral"
//!
//! [embedder]
//! kind = "hashed"          # or "token_count_basis"
//! dim = 64
//!
//! [[rules]]
//! regex = '(?m)^Hypothesis: (.*)\z'
//! lookup = { "The boy looks out the window." = "Label: entailment" }
//!
//! [[rules]]
//! contains = "Echo:"
//! echo_last_user = true
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::backend::{ChatBackend, WireError, WireReply};
use super::{ChatRequest, LlmError};
use crate::text::{normalize_whitespace, tokenize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Only requests for this model.
    pub model: Option<String>,
    /// Substring the last user message must contain.
    pub contains: Option<String>,
    /// Regex over the last user message; captures feed `template` and `lookup`.
    pub regex: Option<String>,
    pub reply: Option<String>,
    #[serde(default)]
    pub echo_last_user: bool,
    /// `$1`-style expansion of the regex captures.
    pub template: Option<String>,
    /// Maps capture group 1 (whitespace-normalized) to a reply; misses fall through.
    pub lookup: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MockEmbedder {
    /// Bag-of-words hashed into `dim` buckets and L2-normalized.
    #[default]
    #[serde(rename = "hashed")]
    Hashed,
    /// The unit basis vector `e_{n-1}` for a text of `n` tokens.
    TokenCountBasis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    #[serde(flatten)]
    pub kind: MockEmbedder,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_dim() -> usize {
    64
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            kind: MockEmbedder::default(),
            dim: default_dim(),
        }
    }
}

impl EmbedderSpec {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let dim = self.dim.max(1);
        let mut v = vec![0.0; dim];
        let tokens = tokenize(text);
        match self.kind {
            MockEmbedder::TokenCountBasis => {
                if !tokens.is_empty() {
                    v[(tokens.len() - 1) % dim] = 1.0;
                }
            }
            MockEmbedder::Hashed => {
                for t in &tokens {
                    v[(fnv1a(t.as_bytes()) % dim as u64) as usize] += 1.0;
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
            }
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRules {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default_reply: Option<String>,
    #[serde(default)]
    pub embedder: EmbedderSpec,
}

impl MockRules {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidRequest(format!("{}: {e}", path.display())))?;
        Self::parse(&raw)
    }

    pub fn parse(raw: &str) -> Result<Self, LlmError> {
        let rules: MockRules =
            toml::from_str(raw).map_err(|e| LlmError::InvalidRequest(format!("mock rules: {e}")))?;
        for (i, r) in rules.rules.iter().enumerate() {
            let actions = [
                r.reply.is_some(),
                r.echo_last_user,
                r.template.is_some(),
                r.lookup.is_some(),
            ];
            if actions.iter().filter(|a| **a).count() != 1 {
                return Err(LlmError::InvalidRequest(format!(
                    "mock rule {i} needs exactly one of reply / echo_last_user / template / lookup"
                )));
            }
            if (r.template.is_some() || r.lookup.is_some()) && r.regex.is_none() {
                return Err(LlmError::InvalidRequest(format!(
                    "mock rule {i}: template and lookup need a regex"
                )));
            }
        }
        Ok(rules)
    }
}

struct CompiledRule {
    rule: MockRule,
    regex: Option<Regex>,
}

impl CompiledRule {
    fn respond(&self, req: &ChatRequest) -> Option<String> {
        let r = &self.rule;
        if r.model.as_ref().is_some_and(|m| *m != req.model) {
            return None;
        }
        let msg = req.last_user().unwrap_or("");
        if r.contains.as_ref().is_some_and(|c| !msg.contains(c.as_str())) {
            return None;
        }
        let caps = match &self.regex {
            Some(re) => Some(re.captures(msg)?),
            None => None,
        };
        if let Some(reply) = &r.reply {
            return Some(reply.clone());
        }
        if r.echo_last_user {
            return Some(msg.to_string());
        }
        let caps = caps?;
        if let Some(template) = &r.template {
            let mut out = String::new();
            caps.expand(template, &mut out);
            return Some(out);
        }
        let key = normalize_whitespace(caps.get(1)?.as_str());
        r.lookup.as_ref()?.get(&key).cloned()
    }
}

type Responder = dyn Fn(&ChatRequest) -> Result<WireReply, WireError> + Send + Sync;

pub struct MockBackend {
    responder: Arc<Responder>,
    embedder: EmbedderSpec,
}

impl MockBackend {
    pub fn from_rules(rules: MockRules) -> Self {
        let compiled: Vec<CompiledRule> = rules
            .rules
            .into_iter()
            .map(|rule| CompiledRule {
                regex: rule.regex.as_deref().map(|re| Regex::new(re).expect("mock regex")),
                rule,
            })
            .collect();
        let default_reply = rules.default_reply;
        MockBackend {
            responder: Arc::new(move |req| {
                compiled
                    .iter()
                    .find_map(|c| c.respond(req))
                    .or_else(|| default_reply.clone())
                    .map(WireReply::stop)
                    .ok_or_else(|| WireError::Invalid("no mock rule matched".into()))
            }),
            embedder: rules.embedder,
        }
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<WireReply, WireError> + Send + Sync + 'static,
    {
        MockBackend {
            responder: Arc::new(f),
            embedder: EmbedderSpec::default(),
        }
    }

    /// Replies with the last user message verbatim.
    pub fn echo() -> Self {
        Self::from_fn(|req| Ok(WireReply::stop(req.last_user().unwrap_or(""))))
    }

    pub fn with_embedder(mut self, embedder: EmbedderSpec) -> Self {
        self.embedder = embedder;
        self
    }
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> &'static str {
        "mock"
    }

    fn chat(&self, req: &ChatRequest) -> Result<WireReply, WireError> {
        (self.responder)(req)
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, WireError> {
        Ok(texts.iter().map(|t| self.embedder.embed(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Decoding;

    fn req(model: &str, content: &str) -> ChatRequest {
        ChatRequest::prompt(model, content.to_string(), Decoding::default())
    }

    #[test]
    fn echo_rule() {
        let rules = MockRules::parse("[[rules]]\necho_last_user = true\n").unwrap();
        let be = MockBackend::from_rules(rules);
        assert_eq!(be.chat(&req("m", "say this")).unwrap().text, "say this");
    }

    #[test]
    fn rules_apply_in_order_with_filters() {
        let rules = MockRules::parse(
            r#"
default_reply = "fallback"
[[rules]]
model = "a"
reply = "from a"
[[rules]]
regex = '(?m)^Label: (\w+)$'
template = "saw $1"
[[rules]]
regex = '(?m)^Q: (.*)$'
lookup = { "hello   world" = "nope", "hello world" = "hi" }
"#,
        )
        .unwrap();
        let be = MockBackend::from_rules(rules);
        assert_eq!(be.chat(&req("a", "x")).unwrap().text, "from a");
        assert_eq!(be.chat(&req("b", "x\nLabel: neutral")).unwrap().text, "saw neutral");
        assert_eq!(be.chat(&req("b", "Q: hello   world")).unwrap().text, "hi");
        assert_eq!(be.chat(&req("b", "Q: unknown")).unwrap().text, "fallback");
    }

    #[test]
    fn rejects_ambiguous_rule() {
        assert!(MockRules::parse("[[rules]]\nreply = \"a\"\necho_last_user = true\n").is_err());
        assert!(MockRules::parse("[[rules]]\ntemplate = \"$1\"\n").is_err());
    }

    #[test]
    fn no_match_without_default_is_an_error() {
        let be = MockBackend::from_rules(MockRules::default());
        assert!(be.chat(&req("m", "x")).is_err());
    }

    #[test]
    fn token_count_basis_embedder() {
        let spec = EmbedderSpec {
            kind: MockEmbedder::TokenCountBasis,
            dim: 8,
        };
        let a = spec.embed("x");
        let b = spec.embed("x y");
        assert_eq!(a.iter().sum::<f64>(), 1.0);
        assert_eq!(b.iter().sum::<f64>(), 1.0);
        assert_eq!(a.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>(), 0.0);
    }

    #[test]
    fn hashed_embedder_is_unit_norm_and_deterministic() {
        let spec = EmbedderSpec::default();
        let a = spec.embed("A boy peers out");
        assert_eq!(a, spec.embed("a BOY peers out"));
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
