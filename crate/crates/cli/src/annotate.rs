//! `serve-annotate` config. When the eval set file does not exist yet and a
//! `[build]` section is present, the set is assembled first.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! eval_set = "eval_set.json"
//! ratings_log = "ratings.jsonl"
//! static_dir = "ui/dist"
//! token = "shared-secret"
//!
//! [build]
//! seed = 7
//! annotators = 4
//! overlap = "partition"
//! sampling = { protocol = "per_source", n = 100 }
//!
//! [[build.sources]]
//! source = "human"
//! task = "nli"
//! dataset = "data/esnli.train.jsonl"
//! bank = "data/esnli.nles.jsonl"
//!
//! [[build.sources]]
//! source = "gpt-3.5-turbo"
//! task = "nli"
//! dataset = "data/snli.test.jsonl"
//! cell = "results/zephyr-7b/xicl_zs/snli"
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use xicl_annotate::{build_eval_set, Candidate, EvalSetSpec, LabelKind, Overlap, Sampling, ServeConfig, SourcePool};
use xicl_core::corpus::{self, TaskKind};
use xicl_core::runner::{read_records, records_file};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateConfig {
    pub bind: Option<SocketAddr>,
    pub eval_set: PathBuf,
    pub ratings_log: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub token: Option<String>,
    pub build: Option<BuildSpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildSpec {
    pub seed: u64,
    pub annotators: usize,
    #[serde(default)]
    pub overlap: Overlap,
    pub sampling: Sampling,
    pub sources: Vec<SourceSpec>,
}

/// NLEs of one source: either a bank over a dataset (gold labels) or the
/// predictions of a results cell (predicted labels, correctness known).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub source: String,
    pub task: TaskKind,
    pub dataset: PathBuf,
    pub bank: Option<PathBuf>,
    /// Only bank records from this generator.
    pub generator: Option<String>,
    pub cell: Option<PathBuf>,
    #[serde(default)]
    pub run: usize,
}

impl AnnotateConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: AnnotateConfig = toml::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Builds the eval set if needed and returns the server config.
    pub fn prepare(&self) -> Result<ServeConfig> {
        let eval_set = self.resolve(&self.eval_set);
        if !eval_set.exists() {
            let Some(build) = &self.build else {
                bail!("{} does not exist and the config has no [build] section", eval_set.display());
            };
            let pools = build
                .sources
                .iter()
                .map(|s| self.pool(s))
                .collect::<Result<Vec<_>>>()?;
            let spec = EvalSetSpec::numbered(build.sampling, build.annotators, build.overlap);
            let set = build_eval_set(&pools, &spec, build.seed)?;
            set.save(&eval_set)?;
            tracing::info!("built {} items into {}", set.items.len(), eval_set.display());
        }
        Ok(ServeConfig {
            bind: self.bind.unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 8080))),
            eval_set,
            ratings_log: self.resolve(&self.ratings_log),
            static_dir: self.static_dir.as_ref().map(|d| self.resolve(d)),
            token: self.token.clone(),
        })
    }

    pub fn pool(&self, s: &SourceSpec) -> Result<SourcePool> {
        let ds = corpus::load_dataset(&self.resolve(&s.dataset), s.task)?;
        let candidates = match (&s.bank, &s.cell) {
            (Some(bank), None) => corpus::load_nle_bank(&self.resolve(bank), &ds)?
                .into_iter()
                .filter(|r| s.generator.as_deref().is_none_or(|g| r.generator == g))
                .map(|r| {
                    let inst = ds.get(&r.instance_id).expect("bank ids resolve").clone();
                    Candidate {
                        label: inst.gold_label,
                        instance: inst,
                        label_kind: LabelKind::Gold,
                        nle: r.text,
                        correct: None,
                    }
                })
                .collect(),
            (None, Some(cell)) => read_records(&records_file(&self.resolve(cell), s.run))?
                .into_iter()
                .filter_map(|p| {
                    let inst = ds.get(&p.instance_id)?.clone();
                    Some(Candidate {
                        instance: inst,
                        label: p.predicted?,
                        label_kind: LabelKind::Predicted,
                        nle: p.nle.filter(|n| !n.is_empty())?,
                        correct: Some(p.correct),
                    })
                })
                .collect(),
            _ => bail!("source {} needs exactly one of bank / cell", s.source),
        };
        Ok(SourcePool {
            source: s.source.clone(),
            candidates,
        })
    }
}
