//! Datasets, NLE banks and the data model shared by every other module.
//!
//! Dataset files carry one JSON object per line with the fields
//! `{id, text_a, text_b, label}`; NLE bank files carry
//! `{instance_id, text, source, mode, generator}`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::normalize_whitespace;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line_no}: malformed record: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("NLE record references unknown instance {0:?}")]
    DanglingId(String),
    #[error("duplicate NLE binding {0}")]
    DuplicateBinding(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Nli,
    Paraphrase,
}

impl TaskKind {
    pub fn labels(self) -> &'static [Label] {
        match self {
            TaskKind::Nli => &[Label::Entailment, Label::Neutral, Label::Contradiction],
            TaskKind::Paraphrase => &[Label::Duplicate, Label::NotDuplicate],
        }
    }

    pub fn contains(self, label: Label) -> bool {
        self.labels().contains(&label)
    }

    /// Field captions used in prompts and in the rating UI.
    pub fn field_names(self) -> (&'static str, &'static str) {
        match self {
            TaskKind::Nli => ("Premise", "Hypothesis"),
            TaskKind::Paraphrase => ("Q1", "Q2"),
        }
    }

    /// Parses a label written in any accepted spelling and checks membership.
    pub fn parse_label(self, raw: &str) -> Result<Label, CorpusError> {
        match raw.parse::<Label>() {
            Ok(label) if self.contains(label) => Ok(label),
            _ => Err(CorpusError::UnknownLabel(raw.to_string())),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Nli => "nli",
            TaskKind::Paraphrase => "paraphrase",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nli" => Ok(TaskKind::Nli),
            "paraphrase" => Ok(TaskKind::Paraphrase),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
    Duplicate,
    NotDuplicate,
}

impl Label {
    /// Canonical token used in data files.
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
            Label::Duplicate => "duplicate",
            Label::NotDuplicate => "not_duplicate",
        }
    }

    /// Surface form used inside prompts ("not duplicate" rather than "not_duplicate").
    pub fn prompt_form(self) -> &'static str {
        match self {
            Label::NotDuplicate => "not duplicate",
            other => other.as_str(),
        }
    }

    /// Every accepted spelling, longest first so that "not duplicate" wins over "duplicate".
    pub fn spellings(self) -> &'static [&'static str] {
        match self {
            Label::Entailment => &["entailment"],
            Label::Neutral => &["neutral"],
            Label::Contradiction => &["contradiction"],
            Label::Duplicate => &["duplicate"],
            Label::NotDuplicate => &["not duplicate", "not_duplicate", "non-duplicate"],
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = normalize_whitespace(s).to_lowercase();
        [
            Label::Entailment,
            Label::Neutral,
            Label::Contradiction,
            Label::Duplicate,
            Label::NotDuplicate,
        ]
        .into_iter()
        .find(|l| l.spellings().contains(&lowered.as_str()))
        .ok_or_else(|| format!("unknown label {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub task: TaskKind,
    pub text_a: String,
    pub text_b: String,
    pub gold_label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub task: TaskKind,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn id_index(&self) -> BTreeMap<&str, &Instance> {
        self.instances.iter().map(|i| (i.id.as_str(), i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NleSource {
    Human,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NleMode {
    None,
    ZeroShot,
    FewShot,
    ZeroShotShort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NleRecord {
    pub instance_id: String,
    pub text: String,
    pub source: NleSource,
    pub mode: NleMode,
    pub generator: String,
}

impl NleRecord {
    pub fn human(instance_id: impl Into<String>, text: impl Into<String>) -> Self {
        NleRecord {
            instance_id: instance_id.into(),
            text: normalize_whitespace(&text.into()),
            source: NleSource::Human,
            mode: NleMode::None,
            generator: "human".to_string(),
        }
    }

    pub fn binding_key(&self) -> String {
        format!(
            "({}, {:?}, {:?}, {})",
            self.instance_id, self.source, self.mode, self.generator
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        match (self.source, self.mode) {
            (NleSource::Human, NleMode::None) => {}
            (NleSource::Human, _) => return Err("human NLE must have mode none".into()),
            (NleSource::Model, NleMode::None) => return Err("model NLE needs a generation mode".into()),
            _ => {}
        }
        if self.text.trim().is_empty() {
            return Err("empty NLE text".into());
        }
        if self.text.contains(['\n', '\r']) {
            return Err("NLE text spans more than one line".into());
        }
        if self.instance_id.is_empty() {
            return Err("empty instance_id".into());
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetLine {
    id: String,
    text_a: String,
    text_b: String,
    label: String,
}

/// Loads a dataset file, deriving name and split from a `<name>.<split>.jsonl` file name.
/// Files without a split segment are treated as test splits.
pub fn load_dataset(path: &Path, task: TaskKind) -> Result<Dataset, CorpusError> {
    let stem = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .trim_end_matches(".jsonl");
    let (name, split) = match stem.rsplit_once('.') {
        Some((name, split)) if split.parse::<Split>().is_ok() => (name, split.parse().unwrap()),
        _ => (stem, Split::Test),
    };
    load_dataset_as(path, task, name, split)
}

pub fn load_dataset_as(
    path: &Path,
    task: TaskKind,
    name: &str,
    split: Split,
) -> Result<Dataset, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_dataset(&raw, task, name, split)
}

pub fn parse_dataset(
    raw: &str,
    task: TaskKind,
    name: &str,
    split: Split,
) -> Result<Dataset, CorpusError> {
    let mut seen = HashSet::new();
    let mut instances = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetLine =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                line_no,
                reason: e.to_string(),
            })?;
        let malformed = |reason: &str| CorpusError::MalformedRecord {
            line_no,
            reason: reason.to_string(),
        };
        let id = rec.id.trim().to_string();
        if id.is_empty() {
            return Err(malformed("empty id"));
        }
        let text_a = normalize_whitespace(&rec.text_a);
        let text_b = normalize_whitespace(&rec.text_b);
        if text_a.is_empty() || text_b.is_empty() {
            return Err(malformed("empty text field"));
        }
        let gold_label = task.parse_label(&rec.label)?;
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        instances.push(Instance {
            id,
            task,
            text_a,
            text_b,
            gold_label,
        });
    }
    Ok(Dataset {
        name: name.to_string(),
        split,
        task,
        instances,
    })
}

/// Canonical line-delimited serialization (fixed field order, canonical labels).
pub fn serialize_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    for inst in &ds.instances {
        let line = DatasetLine {
            id: inst.id.clone(),
            text_a: inst.text_a.clone(),
            text_b: inst.text_b.clone(),
            label: inst.gold_label.as_str().to_string(),
        };
        out.push_str(&serde_json::to_string(&line).expect("dataset line serializes"));
        out.push('\n');
    }
    out
}

pub fn load_nle_bank(path: &Path, dataset: &Dataset) -> Result<Vec<NleRecord>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_nle_bank(&raw, dataset)
}

pub fn parse_nle_bank(raw: &str, dataset: &Dataset) -> Result<Vec<NleRecord>, CorpusError> {
    let ids: HashSet<&str> = dataset.instances.iter().map(|i| i.id.as_str()).collect();
    let mut keys = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: NleRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                line_no: idx + 1,
                reason: e.to_string(),
            })?;
        rec.text = normalize_whitespace(&rec.text);
        rec.validate().map_err(|reason| CorpusError::MalformedRecord {
            line_no: idx + 1,
            reason,
        })?;
        if !ids.contains(rec.instance_id.as_str()) {
            return Err(CorpusError::DanglingId(rec.instance_id));
        }
        if !keys.insert(rec.binding_key()) {
            return Err(CorpusError::DuplicateBinding(rec.binding_key()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn serialize_nle_bank(records: &[NleRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("NLE record serializes"));
        out.push('\n');
    }
    out
}

/// Hex SHA-256 of the canonical serialization.
pub fn dataset_digest(ds: &Dataset) -> String {
    hex::encode(Sha256::digest(serialize_dataset(ds).as_bytes()))
}

pub fn bank_digest(records: &[NleRecord]) -> String {
    hex::encode(Sha256::digest(serialize_nle_bank(records).as_bytes()))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| CorpusError::io(path, e))
}

/// Splits an instance into the memorization-probe prefix and suffix.
/// The merged sentence is `prefix + " " + suffix`.
pub fn merge_instance_text(inst: &Instance) -> (String, String) {
    (
        normalize_whitespace(&inst.text_a),
        normalize_whitespace(&inst.text_b),
    )
}

/// The human NLEs that ship with the crate.
pub mod shipped {
    use super::*;

    const QQP_DATASET: &str = include_str!("../data/banks/qqp_demo.train.jsonl");
    const QQP_BANK: &str = include_str!("../data/banks/qqp_demo.nles.jsonl");
    const ESNLI_DATASET: &str = include_str!("../data/banks/esnli_fewshot.train.jsonl");
    const ESNLI_BANK: &str = include_str!("../data/banks/esnli_fewshot.nles.jsonl");

    /// The 32 QQP training pairs with hand-written explanations.
    pub fn qqp_demo() -> (Dataset, Vec<NleRecord>) {
        let ds = parse_dataset(QQP_DATASET, TaskKind::Paraphrase, "qqp", Split::Train)
            .expect("shipped QQP dataset is valid");
        let bank = parse_nle_bank(QQP_BANK, &ds).expect("shipped QQP bank is valid");
        (ds, bank)
    }

    /// The three e-SNLI demonstrations used for few-shot NLE generation.
    pub fn esnli_fewshot() -> (Dataset, Vec<NleRecord>) {
        let ds = parse_dataset(ESNLI_DATASET, TaskKind::Nli, "esnli_fewshot", Split::Train)
            .expect("shipped e-SNLI demos are valid");
        let bank = parse_nle_bank(ESNLI_BANK, &ds).expect("shipped e-SNLI bank is valid");
        (ds, bank)
    }

    const QQP_FS_DATASET: &str = include_str!("../data/banks/qqp_fewshot.train.jsonl");
    const QQP_FS_BANK: &str = include_str!("../data/banks/qqp_fewshot.nles.jsonl");

    /// The two QQP demonstrations used for few-shot NLE generation.
    pub fn qqp_fewshot() -> (Dataset, Vec<NleRecord>) {
        let ds = parse_dataset(QQP_FS_DATASET, TaskKind::Paraphrase, "qqp_fewshot", Split::Train)
            .expect("shipped QQP demos are valid");
        let bank = parse_nle_bank(QQP_FS_BANK, &ds).expect("shipped QQP demo bank is valid");
        (ds, bank)
    }
}
