use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::corpus::{NleMode, NleSource, Split, TaskKind};
use crate::llm::{BackendConfig, Decoding};
use crate::prompting::PromptFamily;
use crate::selection::Bm25Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Icl,
    XiclHuman,
    XiclZs,
    XiclFs,
    XiclZsShort,
    XiclFsSwap,
    XiclHumanRand,
    IclCosine,
    IclBm25,
    IclSetbsr,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Icl,
        Method::XiclHuman,
        Method::XiclZs,
        Method::XiclFs,
        Method::XiclZsShort,
        Method::XiclFsSwap,
        Method::XiclHumanRand,
        Method::IclCosine,
        Method::IclBm25,
        Method::IclSetbsr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Icl => "icl",
            Method::XiclHuman => "xicl_human",
            Method::XiclZs => "xicl_zs",
            Method::XiclFs => "xicl_fs",
            Method::XiclZsShort => "xicl_zs_short",
            Method::XiclFsSwap => "xicl_fs_swap",
            Method::XiclHumanRand => "xicl_human_rand",
            Method::IclCosine => "icl_cosine",
            Method::IclBm25 => "icl_bm25",
            Method::IclSetbsr => "icl_setbsr",
        }
    }

    /// Row caption in reports.
    pub fn title(self) -> &'static str {
        match self {
            Method::Icl => "ICL",
            Method::XiclHuman => "X-ICL (Human)",
            Method::XiclZs => "zs-X-ICL",
            Method::XiclFs => "fs-X-ICL",
            Method::XiclZsShort => "zs-X-ICL (short)",
            Method::XiclFsSwap => "fs-X-ICL (swapped NLEs)",
            Method::XiclHumanRand => "X-ICL (unrelated human NLEs)",
            Method::IclCosine => "COSINE",
            Method::IclBm25 => "BM25",
            Method::IclSetbsr => "SET-BSR",
        }
    }

    pub fn family(self) -> PromptFamily {
        if self.as_str().starts_with("xicl") {
            PromptFamily::Xicl
        } else {
            PromptFamily::Icl
        }
    }

    /// Provenance the demonstration NLEs must have, if the method uses any.
    pub fn nle_requirement(self) -> Option<(NleSource, NleMode)> {
        match self {
            Method::XiclHuman | Method::XiclHumanRand => Some((NleSource::Human, NleMode::None)),
            Method::XiclZs => Some((NleSource::Model, NleMode::ZeroShot)),
            Method::XiclFs | Method::XiclFsSwap => Some((NleSource::Model, NleMode::FewShot)),
            Method::XiclZsShort => Some((NleSource::Model, NleMode::ZeroShotShort)),
            _ => None,
        }
    }

    /// Registry name of the per-query selector, for retrieval baselines.
    pub fn selector(self) -> Option<&'static str> {
        match self {
            Method::IclCosine => Some("cosine"),
            Method::IclBm25 => Some("bm25"),
            Method::IclSetbsr => Some("set_bsr"),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionOptions {
    pub bm25_k1: f64,
    pub bm25_b: f64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        let p = Bm25Params::default();
        SelectionOptions {
            bm25_k1: p.k1,
            bm25_b: p.b,
        }
    }
}

/// One experiment cell, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub eval_model: String,
    pub nle_generator_model: Option<String>,
    pub demo_dataset: String,
    pub eval_dataset: String,
    /// Bank supplying demonstration NLEs (and, when set, restricting the random pool).
    pub nle_bank: Option<String>,
    pub k: usize,
    pub n_runs: usize,
    pub seed: u64,
    pub decoding: Decoding,
    /// Evaluate only the first `cap` instances of the eval dataset.
    pub cap: Option<usize>,
    pub bm25: SelectionOptions,
    /// SET-BSR token kernel.
    pub kernel: String,
    /// Distinguishes cells that share model, method and eval dataset.
    pub tag: Option<String>,
}

impl RunConfig {
    pub fn new(method: Method, eval_model: &str, demo_dataset: &str, eval_dataset: &str) -> Self {
        RunConfig {
            method,
            eval_model: eval_model.to_string(),
            nle_generator_model: None,
            demo_dataset: demo_dataset.to_string(),
            eval_dataset: eval_dataset.to_string(),
            nle_bank: None,
            k: 8,
            n_runs: 4,
            seed: 0,
            decoding: Decoding::CLASSIFICATION,
            cap: None,
            bm25: SelectionOptions::default(),
            kernel: "exact".to_string(),
            tag: None,
        }
    }

    /// `<model>/<method>/<dataset>[.<tag>]`, with path separators in names replaced.
    pub fn cell_dir(&self) -> PathBuf {
        let clean = |s: &str| s.replace(['/', '\\'], "_");
        let leaf = match &self.tag {
            Some(t) => format!("{}.{}", clean(&self.eval_dataset), clean(t)),
            None => clean(&self.eval_dataset),
        };
        PathBuf::from(clean(&self.eval_model)).join(self.method.as_str()).join(leaf)
    }

    pub fn id(&self) -> String {
        self.cell_dir().to_string_lossy().replace('\\', "/")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("k must be positive".into());
        }
        if self.n_runs == 0 {
            return Err("n_runs must be positive".into());
        }
        if self.eval_model.trim().is_empty() {
            return Err("eval_model is empty".into());
        }
        if self.decoding.max_tokens == 0 || !(self.decoding.temperature >= 0.0) {
            return Err("invalid decoding parameters".into());
        }
        match (self.method.nle_requirement(), &self.nle_bank) {
            (Some(_), None) => Err(format!("{} needs an nle_bank", self.method)),
            (None, Some(_)) if self.method.selector().is_some() => Err(format!(
                "{} selects demonstrations per query and takes no NLEs",
                self.method
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub task: TaskKind,
    pub path: Option<PathBuf>,
    /// Built-in data instead of a file: `qqp_demo`, `esnli_fewshot` or `qqp_fewshot`.
    pub shipped: Option<String>,
    pub split: Option<Split>,
    /// Default evaluation cap for cells on this dataset.
    pub cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSpec {
    pub name: String,
    /// Dataset the bank's instance ids resolve in.
    pub dataset: String,
    pub path: Option<PathBuf>,
    pub shipped: Option<String>,
}

/// A cell as written in the suite file; unset fields fall back to suite defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub method: Method,
    pub eval_model: Option<String>,
    pub nle_generator_model: Option<String>,
    pub demo_dataset: String,
    pub eval_dataset: String,
    pub nle_bank: Option<String>,
    pub k: Option<usize>,
    pub n_runs: Option<usize>,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub cap: Option<usize>,
    pub bm25_k1: Option<f64>,
    pub bm25_b: Option<f64>,
    pub kernel: Option<String>,
    pub tag: Option<String>,
}

/// The suite file.
///
/// ```toml
/// results_dir = "results"
/// cache = "cache/responses.jsonl"
/// eval_model = "zephyr-7b"
/// seed = 42
///
/// [backend]
/// backend = "mock"
/// rules = "mock_rules.toml"
///
/// [[datasets]]
/// name = "snli"
/// task = "nli"
/// path = "data/snli.test.jsonl"
///
/// [[banks]]
/// name = "esnli_human"
/// dataset = "esnli"
/// path = "data/esnli.nles.jsonl"
///
/// [[cells]]
/// method = "xicl_human"
/// demo_dataset = "esnli"
/// eval_dataset = "snli"
/// nle_bank = "esnli_human"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "default_results_dir")]
    pub results_dir: PathBuf,
    pub cache: Option<PathBuf>,
    /// Optional JSONL log of every client call (cache hits, retries, errors).
    pub run_log: Option<PathBuf>,
    pub eval_model: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_baseline")]
    pub baseline: Method,
    pub backend: BackendConfig,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub banks: Vec<BankSpec>,
    #[serde(default)]
    pub cells: Vec<CellSpec>,
    /// Directory relative paths resolve against; set by [`SuiteConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_results_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_baseline() -> Method {
    Method::Icl
}

impl SuiteConfig {
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let invalid = |reason: String| RunnerError::ConfigInvalid {
            path: path.to_path_buf(),
            reason,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
        let mut cfg: SuiteConfig = toml::from_str(&raw).map_err(|e| invalid(e.to_string()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.check().map_err(invalid)?;
        Ok(cfg)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn cell_configs(&self) -> Result<Vec<RunConfig>, String> {
        self.cells
            .iter()
            .map(|c| {
                let eval_model = c
                    .eval_model
                    .clone()
                    .or_else(|| self.eval_model.clone())
                    .ok_or_else(|| format!("cell {} on {} has no eval_model", c.method, c.eval_dataset))?;
                let cap = c.cap.or_else(|| {
                    self.datasets
                        .iter()
                        .find(|d| d.name == c.eval_dataset)
                        .and_then(|d| d.cap)
                });
                let defaults = SelectionOptions::default();
                let mut decoding = Decoding::CLASSIFICATION;
                if let Some(t) = c.temperature {
                    decoding.temperature = t;
                }
                if let Some(m) = c.max_tokens {
                    decoding.max_tokens = m;
                }
                let rc = RunConfig {
                    method: c.method,
                    eval_model,
                    nle_generator_model: c.nle_generator_model.clone(),
                    demo_dataset: c.demo_dataset.clone(),
                    eval_dataset: c.eval_dataset.clone(),
                    nle_bank: c.nle_bank.clone(),
                    k: c.k.unwrap_or(8),
                    n_runs: c.n_runs.unwrap_or(4),
                    seed: c.seed.unwrap_or(self.seed),
                    decoding,
                    cap,
                    bm25: SelectionOptions {
                        bm25_k1: c.bm25_k1.unwrap_or(defaults.bm25_k1),
                        bm25_b: c.bm25_b.unwrap_or(defaults.bm25_b),
                    },
                    kernel: c.kernel.clone().unwrap_or_else(|| "exact".to_string()),
                    tag: c.tag.clone(),
                };
                rc.validate().map_err(|e| format!("cell {}: {e}", rc.id()))?;
                Ok(rc)
            })
            .collect()
    }

    fn check(&self) -> Result<(), String> {
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return Err(format!("dataset {} declared twice", d.name));
            }
            if d.path.is_some() == d.shipped.is_some() {
                return Err(format!("dataset {} needs exactly one of path / shipped", d.name));
            }
        }
        let mut banks = BTreeMap::new();
        for b in &self.banks {
            if banks.insert(b.name.as_str(), b).is_some() {
                return Err(format!("bank {} declared twice", b.name));
            }
            if !names.contains(b.dataset.as_str()) {
                return Err(format!("bank {} refers to unknown dataset {}", b.name, b.dataset));
            }
            if b.path.is_some() == b.shipped.is_some() {
                return Err(format!("bank {} needs exactly one of path / shipped", b.name));
            }
        }
        let cells = self.cell_configs()?;
        let mut dirs = BTreeSet::new();
        for c in &cells {
            for ds in [&c.demo_dataset, &c.eval_dataset] {
                if !names.contains(ds.as_str()) {
                    return Err(format!("cell {} refers to unknown dataset {ds}", c.id()));
                }
            }
            if let Some(b) = &c.nle_bank {
                let bank = banks
                    .get(b.as_str())
                    .ok_or_else(|| format!("cell {} refers to unknown bank {b}", c.id()))?;
                if bank.dataset != c.demo_dataset {
                    return Err(format!(
                        "cell {}: bank {b} belongs to {}, not the demo dataset {}",
                        c.id(),
                        bank.dataset,
                        c.demo_dataset
                    ));
                }
            }
            if !dirs.insert(c.cell_dir()) {
                return Err(format!("two cells write to {}; add a tag", c.id()));
            }
        }
        Ok(())
    }
}
