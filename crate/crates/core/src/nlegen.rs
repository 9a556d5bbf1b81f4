//! NLE synthesis for labelled instances in zero-shot, few-shot and
//! zero-shot-short modes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Dataset, Instance, Label, NleMode, NleRecord, NleSource, TaskKind};
use crate::llm::{CacheKey, ChatRequest, Decoding, LlmClient, LlmError};
use crate::prompting::{parse_completion, render, Demonstration, PromptError, PromptFamily, PromptSpec};
use crate::text::normalize_whitespace;

#[derive(Debug, Error)]
pub enum NlegenError {
    #[error("invalid generation job: {0}")]
    InvalidJob(String),
    #[error("no training instance with a human NLE for label {0}")]
    MissingCategory(Label),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NleGenJob {
    pub mode: NleMode,
    pub generator_model: String,
    pub targets: Vec<(Instance, Label)>,
    pub demos: Vec<Demonstration>,
    pub meta_prompt_id: String,
    /// Seed that drew the few-shot demonstrations, if any.
    pub seed: Option<u64>,
}

impl NleGenJob {
    pub fn new(
        mode: NleMode,
        generator_model: &str,
        task: TaskKind,
        targets: Vec<(Instance, Label)>,
        demos: Vec<Demonstration>,
    ) -> Self {
        let suffix = match mode {
            NleMode::None => "none",
            NleMode::ZeroShot => "zero",
            NleMode::FewShot => "few",
            NleMode::ZeroShotShort => "zero_short",
        };
        NleGenJob {
            mode,
            generator_model: generator_model.to_string(),
            targets,
            demos,
            meta_prompt_id: format!("{task}_{suffix}"),
            seed: None,
        }
    }

    pub fn family(&self) -> Result<PromptFamily, NlegenError> {
        match self.mode {
            NleMode::ZeroShot => Ok(PromptFamily::NlegenZero),
            NleMode::FewShot => Ok(PromptFamily::NlegenFew),
            NleMode::ZeroShotShort => Ok(PromptFamily::NlegenZeroShort),
            NleMode::None => Err(NlegenError::InvalidJob("mode must be a generation mode".into())),
        }
    }

    pub fn validate(&self) -> Result<(), NlegenError> {
        let invalid = |m: &str| Err(NlegenError::InvalidJob(m.to_string()));
        self.family()?;
        if self.generator_model.trim().is_empty() {
            return invalid("generator model is empty");
        }
        if self.mode == NleMode::FewShot {
            if self.demos.is_empty() {
                return invalid("few-shot generation needs demonstrations");
            }
            let mut labels: Vec<Label> = self.demos.iter().map(|d| d.label).collect();
            labels.sort();
            labels.dedup();
            if labels.len() != self.demos.len() {
                return invalid("few-shot demonstrations must have distinct labels");
            }
        } else if !self.demos.is_empty() {
            return invalid("zero-shot generation takes no demonstrations");
        }
        for (inst, label) in &self.targets {
            if !inst.task.contains(*label) {
                return Err(NlegenError::InvalidJob(format!("label {label} is not a {} label", inst.task)));
            }
        }
        Ok(())
    }

    /// SHA-256 over the job's canonical JSON.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("job serializes")))
    }

    pub fn prompt_for(&self, target: &Instance, label: Label) -> Result<String, NlegenError> {
        let spec = PromptSpec::new(self.family()?, self.demos.clone(), target.clone(), Some(label));
        Ok(render(&spec)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStatus {
    Ok,
    /// Empty after one retry; recorded with empty text.
    Empty,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEntry {
    pub instance_id: String,
    pub cache_key: CacheKey,
    pub status: TargetStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NleGenManifest {
    pub config_hash: String,
    pub mode: NleMode,
    pub generator: String,
    pub meta_prompt_id: String,
    pub seed: Option<u64>,
    pub demo_ids: Vec<String>,
    pub targets: Vec<TargetEntry>,
}

impl NleGenManifest {
    pub fn failures(&self) -> impl Iterator<Item = &TargetEntry> {
        self.targets.iter().filter(|t| t.status == TargetStatus::Failed)
    }

    pub fn flagged_empty(&self) -> impl Iterator<Item = &TargetEntry> {
        self.targets.iter().filter(|t| t.status == TargetStatus::Empty)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NleGenOutput {
    /// One record per target that did not fail, in target order.
    pub records: Vec<NleRecord>,
    pub manifest: NleGenManifest,
}

/// Generates one NLE per target at temperature 0. Per-target failures are
/// recorded in the manifest and do not stop the batch.
pub fn generate(job: &NleGenJob, client: &LlmClient) -> Result<NleGenOutput, NlegenError> {
    job.validate()?;
    let family = job.family()?;
    let reqs: Vec<ChatRequest> = job
        .targets
        .iter()
        .map(|(inst, label)| {
            Ok(ChatRequest::prompt(
                &job.generator_model,
                job.prompt_for(inst, *label)?,
                Decoding::NLE_GENERATION,
            ))
        })
        .collect::<Result<_, NlegenError>>()?;

    let work: Vec<(TaskKind, &ChatRequest)> = job.targets.iter().map(|(i, _)| i.task).zip(&reqs).collect();
    let outcomes: Vec<Result<Option<String>, LlmError>> = client.fan_out(&work, |(task, req)| {
        for _ in 0..2 {
            let resp = client.complete(req)?;
            if let Some(nle) = parse_completion(&resp.text, *task, family).nle {
                return Ok(Some(normalize_whitespace(&nle)));
            }
        }
        Ok(None)
    });

    let mut records = Vec::new();
    let mut entries = Vec::new();
    for (((inst, _), req), outcome) in job.targets.iter().zip(&reqs).zip(outcomes) {
        let cache_key = client.digest(req);
        let (status, error) = match outcome {
            Ok(text) => {
                let status = if text.is_some() {
                    TargetStatus::Ok
                } else {
                    tracing::warn!(instance = %inst.id, "empty NLE after retry");
                    TargetStatus::Empty
                };
                records.push(NleRecord {
                    instance_id: inst.id.clone(),
                    text: text.unwrap_or_default(),
                    source: NleSource::Model,
                    mode: job.mode,
                    generator: job.generator_model.clone(),
                });
                (status, None)
            }
            Err(e) => {
                tracing::warn!(instance = %inst.id, "NLE generation failed: {e}");
                (TargetStatus::Failed, Some(e.to_string()))
            }
        };
        entries.push(TargetEntry {
            instance_id: inst.id.clone(),
            cache_key,
            status,
            error,
        });
    }
    Ok(NleGenOutput {
        records,
        manifest: NleGenManifest {
            config_hash: job.config_hash(),
            mode: job.mode,
            generator: job.generator_model.clone(),
            meta_prompt_id: job.meta_prompt_id.clone(),
            seed: job.seed,
            demo_ids: job.demos.iter().map(|d| d.instance.id.clone()).collect(),
            targets: entries,
        },
    })
}

/// One demonstration per label, in label order, each drawn uniformly from the
/// training instances of that label that have a human NLE in `bank`.
pub fn build_fewshot_demos(train: &Dataset, bank: &[NleRecord], seed: u64) -> Result<Vec<Demonstration>, NlegenError> {
    let mut human: BTreeMap<&str, &NleRecord> = BTreeMap::new();
    for r in bank.iter().filter(|r| r.source == NleSource::Human) {
        human.entry(r.instance_id.as_str()).or_insert(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train
        .task
        .labels()
        .iter()
        .map(|&label| {
            let candidates: Vec<&Instance> = train
                .instances
                .iter()
                .filter(|i| i.gold_label == label && human.contains_key(i.id.as_str()))
                .collect();
            let inst = candidates
                .choose(&mut rng)
                .ok_or(NlegenError::MissingCategory(label))?;
            Ok(Demonstration::new((*inst).clone(), Some(human[inst.id.as_str()].clone()))?)
        })
        .collect()
}
