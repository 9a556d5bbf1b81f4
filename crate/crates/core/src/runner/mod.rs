//! Experiment cells: demonstration selection, prompting, classification and
//! the results tree, plus suite orchestration and reporting.

mod config;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ablations::{randomize_human_nles, shift_pairing, swap_nles, AblationError, AblationManifest};
use crate::corpus::{
    self, shipped, CorpusError, Dataset, Instance, Label, NleRecord, Split,
};
use crate::llm::{BackendRegistry, CacheKey, ChatRequest, LlmClient, LlmError, ResponseCache};
use crate::metrics::{accuracy, AccuracySummary, MetricsError};
use crate::prompting::{parse_completion, render, Demonstration, PromptError, PromptSpec};
use crate::selection::{
    select_random, Bm25Params, QuerySelection, ScoredCandidate, SelectionError, SelectionManifest, SelectorRegistry,
    SelectorSetup,
};

pub use config::{BankSpec, CellSpec, DatasetSpec, Method, RunConfig, SelectionOptions, SuiteConfig};
pub use report::{
    aggregate, column_key, column_title, render_markdown, Column, ReportCell, ReportModel, ReportRow, ShiftEntry,
    ShiftRow, Table2Row, ADVERSARIAL_DATASETS,
};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid config {}: {reason}", path.display())]
    ConfigInvalid { path: PathBuf, reason: String },
    #[error("invalid cell: {0}")]
    Cell(String),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("unknown NLE bank {0}")]
    UnknownBank(String),
    #[error("no {baseline} cell to compare against on {dataset}")]
    MissingBaseline { baseline: String, dataset: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Ablation(#[from] AblationError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunnerError {
    RunnerError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Per-purpose seed: first 8 bytes of sha256("<base>:<purpose>:<run>").
pub fn derive_seed(base: u64, purpose: &str, run: usize) -> u64 {
    let d = Sha256::digest(format!("{base}:{purpose}:{run}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loaded datasets and banks, the client and the selector registry.
pub struct SuiteContext {
    pub datasets: BTreeMap<String, Dataset>,
    pub banks: BTreeMap<String, Vec<NleRecord>>,
    pub client: Arc<LlmClient>,
    pub selectors: SelectorRegistry,
}

impl SuiteContext {
    pub fn new(client: Arc<LlmClient>) -> Self {
        SuiteContext {
            datasets: BTreeMap::new(),
            banks: BTreeMap::new(),
            client,
            selectors: SelectorRegistry::default(),
        }
    }

    pub fn add_dataset(&mut self, ds: Dataset) {
        self.datasets.insert(ds.name.clone(), ds);
    }

    pub fn add_bank(&mut self, name: &str, records: Vec<NleRecord>) {
        self.banks.insert(name.to_string(), records);
    }

    /// Loads every dataset and bank the suite declares.
    pub fn load(suite: &SuiteConfig, client: Arc<LlmClient>) -> Result<Self, RunnerError> {
        let mut ctx = SuiteContext::new(client);
        for spec in &suite.datasets {
            let mut ds = match (&spec.path, &spec.shipped) {
                (Some(p), _) => corpus::load_dataset_as(
                    &suite.resolve_path(p),
                    spec.task,
                    &spec.name,
                    spec.split.unwrap_or(Split::Test),
                )?,
                (None, Some(name)) => shipped_data(name)?.0,
                (None, None) => return Err(RunnerError::UnknownDataset(spec.name.clone())),
            };
            if ds.task != spec.task {
                return Err(RunnerError::Cell(format!("dataset {} is not a {} dataset", spec.name, spec.task)));
            }
            ds.name = spec.name.clone();
            if let Some(split) = spec.split {
                ds.split = split;
            }
            ctx.add_dataset(ds);
        }
        for spec in &suite.banks {
            let ds = ctx
                .datasets
                .get(&spec.dataset)
                .ok_or_else(|| RunnerError::UnknownDataset(spec.dataset.clone()))?;
            let records = match (&spec.path, &spec.shipped) {
                (Some(p), _) => corpus::load_nle_bank(&suite.resolve_path(p), ds)?,
                (None, Some(name)) => shipped_data(name)?.1,
                (None, None) => return Err(RunnerError::UnknownBank(spec.name.clone())),
            };
            ctx.add_bank(&spec.name, records);
        }
        Ok(ctx)
    }

    fn dataset(&self, name: &str) -> Result<&Dataset, RunnerError> {
        self.datasets
            .get(name)
            .ok_or_else(|| RunnerError::UnknownDataset(name.to_string()))
    }
}

fn shipped_data(name: &str) -> Result<(Dataset, Vec<NleRecord>), RunnerError> {
    match name {
        "qqp_demo" => Ok(shipped::qqp_demo()),
        "esnli_fewshot" => Ok(shipped::esnli_fewshot()),
        "qqp_fewshot" => Ok(shipped::qqp_fewshot()),
        other => Err(RunnerError::UnknownDataset(format!("shipped:{other}"))),
    }
}

/// One run's prompts, ready to send.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub run: usize,
    pub queries: Vec<Instance>,
    pub requests: Vec<ChatRequest>,
    pub selection: SelectionManifest,
    pub ablation: Option<AblationManifest>,
}

#[derive(Debug, Clone)]
pub struct CellPlan {
    pub config: RunConfig,
    pub config_hash: String,
    pub digests: Digests,
    pub runs: Vec<RunPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digests {
    pub eval_dataset: String,
    pub demo_dataset: String,
    pub nle_bank: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub gold: Label,
    pub predicted: Option<Label>,
    pub correct: bool,
    pub nle: Option<String>,
    pub raw: String,
    pub cache_key: CacheKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: usize,
    pub selection: SelectionManifest,
    pub ablation: Option<AblationManifest>,
    pub accuracy: f64,
}

/// `manifest.json` of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub digests: Option<Digests>,
    pub runs: Vec<RunManifest>,
    /// Set when the cell stopped early; `runs` then holds the completed runs only.
    pub aborted: Option<String>,
}

/// `summary.json` of a cell; the unit the report aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub config: RunConfig,
    pub config_hash: String,
    pub summary: AccuracySummary,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: CellSummary,
    pub predictions: Vec<Vec<PredictionRecord>>,
    pub manifest: CellManifest,
}

/// A cell that stopped early, with what it had completed.
#[derive(Debug)]
pub struct CellFailure {
    pub error: RunnerError,
    pub manifest: CellManifest,
}

fn filter_bank<'a>(cfg: &RunConfig, bank: &'a [NleRecord]) -> Result<Vec<&'a NleRecord>, RunnerError> {
    let Some((source, mode)) = cfg.method.nle_requirement() else {
        return Ok(bank.iter().collect());
    };
    let kept: Vec<&NleRecord> = bank
        .iter()
        .filter(|r| r.source == source && r.mode == mode)
        .filter(|r| {
            cfg.nle_generator_model
                .as_deref()
                .is_none_or(|g| r.generator == g)
        })
        .collect();
    if kept.is_empty() {
        return Err(RunnerError::Cell(format!(
            "bank {} has no {source:?}/{mode:?} NLEs{} for {}",
            cfg.nle_bank.as_deref().unwrap_or("?"),
            cfg.nle_generator_model
                .as_deref()
                .map(|g| format!(" from {g}"))
                .unwrap_or_default(),
            cfg.method
        )));
    }
    Ok(kept)
}

/// Builds every prompt of a cell without calling the model.
pub fn plan_cell(ctx: &SuiteContext, cfg: &RunConfig) -> Result<CellPlan, RunnerError> {
    cfg.validate().map_err(RunnerError::Cell)?;
    let eval = ctx.dataset(&cfg.eval_dataset)?;
    let demo_ds = ctx.dataset(&cfg.demo_dataset)?;
    shift_pairing((&demo_ds.name, demo_ds.task), (&eval.name, eval.task))?;

    let bank = match &cfg.nle_bank {
        Some(b) => Some(
            ctx.banks
                .get(b)
                .ok_or_else(|| RunnerError::UnknownBank(b.clone()))?
                .as_slice(),
        ),
        None => None,
    };
    let digests = Digests {
        eval_dataset: corpus::dataset_digest(eval),
        demo_dataset: corpus::dataset_digest(demo_ds),
        nle_bank: bank.map(corpus::bank_digest),
    };
    let config_hash = sha_hex(
        serde_json::to_string(&(cfg, &digests))
            .expect("config serializes")
            .as_bytes(),
    );

    let queries: Vec<Instance> = eval
        .instances
        .iter()
        .take(cfg.cap.unwrap_or(usize::MAX))
        .cloned()
        .collect();
    let family = cfg.method.family();
    let build = |demos: &[Demonstration], q: &Instance| -> Result<ChatRequest, RunnerError> {
        let spec = PromptSpec::new(family, demos.to_vec(), q.clone(), None);
        Ok(ChatRequest::prompt(&cfg.eval_model, render(&spec)?, cfg.decoding))
    };

    let mut runs = Vec::with_capacity(cfg.n_runs);
    if let Some(selector_name) = cfg.method.selector() {
        let setup = SelectorSetup {
            pool: &demo_ds.instances,
            bm25: Bm25Params {
                k1: cfg.bm25.bm25_k1,
                b: cfg.bm25.bm25_b,
            },
            kernel: cfg.kernel.clone(),
            client: Some(ctx.client.clone()),
        };
        let selector = ctx.selectors.build(selector_name, &setup)?;
        let index = demo_ds.id_index();
        let mut selections = Vec::with_capacity(queries.len());
        let mut requests = Vec::with_capacity(queries.len());
        for q in &queries {
            let chosen = selector.select(q, cfg.k)?;
            let demos = chosen
                .iter()
                .map(|c| Ok(Demonstration::new((*index[c.instance_id.as_str()]).clone(), None)?))
                .collect::<Result<Vec<_>, RunnerError>>()?;
            requests.push(build(&demos, q)?);
            selections.push(QuerySelection {
                query_id: Some(q.id.clone()),
                chosen,
            });
        }
        let mut params = BTreeMap::new();
        if selector_name == "bm25" {
            params.insert("k1".to_string(), cfg.bm25.bm25_k1.to_string());
            params.insert("b".to_string(), cfg.bm25.bm25_b.to_string());
        }
        if selector_name == "set_bsr" {
            params.insert("kernel".to_string(), cfg.kernel.clone());
        }
        // Per-query selection is deterministic; every run sends the same prompts.
        let selection = SelectionManifest {
            strategy: selector_name.to_string(),
            k: cfg.k,
            seed: None,
            params,
            queries: selections,
        };
        for run in 0..cfg.n_runs {
            runs.push(RunPlan {
                run,
                queries: queries.clone(),
                requests: requests.clone(),
                selection: selection.clone(),
                ablation: None,
            });
        }
    } else {
        let usable = match bank {
            Some(b) => filter_bank(cfg, b)?,
            None => Vec::new(),
        };
        let nle_of: HashMap<&str, &NleRecord> = usable.iter().map(|r| (r.instance_id.as_str(), *r)).collect();
        // With a bank, ICL and X-ICL cells draw from the same explained pool.
        let pool: Vec<Instance> = demo_ds
            .instances
            .iter()
            .filter(|i| bank.is_none() || nle_of.contains_key(i.id.as_str()))
            .cloned()
            .collect();
        for run in 0..cfg.n_runs {
            let drawn = select_random(&pool, cfg.k, cfg.seed, run, cfg.n_runs)?;
            let mut demos = drawn
                .iter()
                .map(|inst| {
                    let nle = match family {
                        crate::prompting::PromptFamily::Xicl => nle_of.get(inst.id.as_str()).map(|r| (*r).clone()),
                        _ => None,
                    };
                    Ok(Demonstration::new(inst.clone(), nle)?)
                })
                .collect::<Result<Vec<_>, RunnerError>>()?;
            let mut ablation = None;
            match cfg.method {
                Method::XiclFsSwap => {
                    let out = swap_nles(&demos, derive_seed(cfg.seed, "swap", run))?;
                    demos = out.demos;
                    ablation = Some(out.manifest);
                }
                Method::XiclHumanRand => {
                    let human: Vec<NleRecord> = usable.iter().map(|r| (*r).clone()).collect();
                    let out = randomize_human_nles(&demos, &human, derive_seed(cfg.seed, "random_human", run))?;
                    demos = out.demos;
                    ablation = Some(out.manifest);
                }
                _ => {}
            }
            let requests = queries
                .iter()
                .map(|q| build(&demos, q))
                .collect::<Result<Vec<_>, _>>()?;
            let selection = SelectionManifest {
                strategy: "random".to_string(),
                k: cfg.k,
                seed: Some(cfg.seed),
                params: BTreeMap::new(),
                queries: vec![QuerySelection {
                    query_id: None,
                    chosen: drawn
                        .iter()
                        .enumerate()
                        .map(|(i, inst)| ScoredCandidate {
                            instance_id: inst.id.clone(),
                            score: 0.0,
                            rank: i + 1,
                        })
                        .collect(),
                }],
            };
            runs.push(RunPlan {
                run,
                queries: queries.clone(),
                requests,
                selection,
                ablation,
            });
        }
    }
    Ok(CellPlan {
        config: cfg.clone(),
        config_hash,
        digests,
        runs,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    corpus::write_file(path, &s).map_err(RunnerError::from)
}

fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<(), RunnerError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    corpus::write_file(path, &s).map_err(RunnerError::from)
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, RunnerError> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io_err(path, e)))
        .collect()
}

pub fn records_file(cell_dir: &Path, run: usize) -> PathBuf {
    cell_dir.join(format!("run{run}.records"))
}

/// Runs one cell. With `results_dir`, writes `run<i>.records`, `summary.json`
/// and `manifest.json` under `results_dir/<config.cell_dir()>`; an aborted cell
/// still writes its partial manifest.
pub fn run_cell(ctx: &SuiteContext, cfg: &RunConfig, results_dir: Option<&Path>) -> Result<RunResult, CellFailure> {
    let dir = results_dir.map(|r| r.join(cfg.cell_dir()));
    let mut manifest = CellManifest {
        config: cfg.clone(),
        config_hash: String::new(),
        digests: None,
        runs: Vec::new(),
        aborted: None,
    };
    let result = execute(ctx, cfg, dir.as_deref(), &mut manifest);
    match result {
        Ok((summary, predictions)) => {
            if let Some(d) = &dir {
                let written = write_json(&d.join("summary.json"), &summary)
                    .and_then(|_| write_json(&d.join("manifest.json"), &manifest));
                if let Err(error) = written {
                    return Err(CellFailure { error, manifest });
                }
            }
            Ok(RunResult {
                summary,
                predictions,
                manifest,
            })
        }
        Err(error) => {
            manifest.aborted = Some(error.to_string());
            if let Some(d) = &dir {
                if let Err(e) = write_json(&d.join("manifest.json"), &manifest) {
                    tracing::warn!("could not write partial manifest: {e}");
                }
            }
            Err(CellFailure { error, manifest })
        }
    }
}

fn execute(
    ctx: &SuiteContext,
    cfg: &RunConfig,
    dir: Option<&Path>,
    manifest: &mut CellManifest,
) -> Result<(CellSummary, Vec<Vec<PredictionRecord>>), RunnerError> {
    let plan = plan_cell(ctx, cfg)?;
    manifest.config_hash = plan.config_hash.clone();
    manifest.digests = Some(plan.digests.clone());
    let task = ctx.dataset(&cfg.eval_dataset)?.task;
    let family = cfg.method.family();
    let mut per_run = Vec::with_capacity(plan.runs.len());
    let mut predictions = Vec::with_capacity(plan.runs.len());
    for run in plan.runs {
        let replies = ctx.client.complete_many(&run.requests);
        let mut parsed = Vec::with_capacity(replies.len());
        let mut records = Vec::with_capacity(replies.len());
        for ((q, req), reply) in run.queries.iter().zip(&run.requests).zip(replies) {
            let reply = reply?;
            let p = parse_completion(&reply.text, task, family);
            records.push(PredictionRecord {
                instance_id: q.id.clone(),
                gold: q.gold_label,
                predicted: p.label,
                correct: p.label == Some(q.gold_label),
                nle: p.nle.clone(),
                raw: reply.text,
                cache_key: ctx.client.digest(req),
            });
            parsed.push(p);
        }
        let golds: Vec<Label> = run.queries.iter().map(|q| q.gold_label).collect();
        let acc = accuracy(&parsed, &golds)?;
        if let Some(d) = dir {
            write_records(&records_file(d, run.run), &records)?;
        }
        manifest.runs.push(RunManifest {
            run: run.run,
            selection: run.selection,
            ablation: run.ablation,
            accuracy: acc,
        });
        per_run.push(acc);
        predictions.push(records);
    }
    let summary = CellSummary {
        config: cfg.clone(),
        config_hash: plan.config_hash,
        summary: AccuracySummary::from_runs(&cfg.eval_dataset, cfg.method.as_str(), per_run),
    };
    Ok((summary, predictions))
}

/// Command-line replacements for suite settings.
#[derive(Debug, Clone, Default)]
pub struct SuiteOverrides {
    pub results_dir: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub backend: Option<String>,
    /// When set, only cells with one of these methods run.
    pub methods: Option<Vec<Method>>,
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub results_dir: PathBuf,
    pub completed: Vec<CellSummary>,
    pub aborted: Vec<(RunConfig, String)>,
    pub reports: Vec<ReportModel>,
    /// Set when the cells could not be aggregated.
    pub report_error: Option<String>,
}

impl SuiteOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.aborted.is_empty() && self.report_error.is_none() {
            0
        } else {
            1
        }
    }
}

/// Builds the client a suite describes.
pub fn suite_client(suite: &SuiteConfig, cache_override: Option<&Path>) -> Result<Arc<LlmClient>, RunnerError> {
    let mut backend = suite.backend.clone();
    if let Some(r) = &backend.rules {
        backend.rules = Some(suite.resolve_path(r));
    }
    let cache_path = cache_override
        .map(Path::to_path_buf)
        .or_else(|| suite.cache.as_ref().map(|c| suite.resolve_path(c)));
    let cache = match cache_path {
        Some(p) => ResponseCache::open(&p)?,
        None => ResponseCache::in_memory(),
    };
    Ok(Arc::new(LlmClient::from_config(
        &backend,
        &BackendRegistry::default(),
        Arc::new(cache),
    )?))
}

/// Loads a suite file, runs every cell in order and writes the report.
/// Cell failures are collected rather than returned.
pub fn run_suite(path: &Path, overrides: &SuiteOverrides) -> Result<SuiteOutcome, RunnerError> {
    let mut suite = SuiteConfig::load(path)?;
    if let Some(b) = &overrides.backend {
        // Keep the recorded endpoint identity so replayed keys still match.
        suite.backend.endpoint = Some(suite.backend.endpoint_id());
        suite.backend.backend = b.clone();
    }
    let mut cells = suite.cell_configs().map_err(|reason| RunnerError::ConfigInvalid {
        path: path.to_path_buf(),
        reason,
    })?;
    if let Some(keep) = &overrides.methods {
        cells.retain(|c| keep.contains(&c.method));
    }
    let results_dir = overrides
        .results_dir
        .clone()
        .unwrap_or_else(|| suite.resolve_path(&suite.results_dir));
    let client = suite_client(&suite, overrides.cache.as_deref())?;
    let ctx = SuiteContext::load(&suite, client.clone())?;

    let mut completed = Vec::new();
    let mut aborted = Vec::new();
    for cfg in &cells {
        tracing::info!(cell = %cfg.id(), "running");
        match run_cell(&ctx, cfg, Some(&results_dir)) {
            Ok(r) => completed.push(r.summary),
            Err(f) => {
                tracing::error!(cell = %cfg.id(), "aborted: {}", f.error);
                aborted.push((cfg.clone(), f.error.to_string()));
            }
        }
    }

    if let Some(log) = &suite.run_log {
        let mut s = String::new();
        for rec in client.call_log() {
            s.push_str(&serde_json::to_string(&rec).expect("call record serializes"));
            s.push('\n');
        }
        corpus::write_file(&suite.resolve_path(log), &s)?;
    }

    let (reports, report_error) = match aggregate(&completed, suite.baseline) {
        Ok(r) => (r, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    write_report(&results_dir, &reports, report_error.as_deref())?;
    Ok(SuiteOutcome {
        results_dir,
        completed,
        aborted,
        reports,
        report_error,
    })
}

/// Writes `report.md` and `report.json` into the results directory.
pub fn write_report(results_dir: &Path, reports: &[ReportModel], error: Option<&str>) -> Result<(), RunnerError> {
    let mut md = render_markdown(reports);
    if let Some(e) = error {
        md.push_str(&format!("\nReport incomplete: {e}\n"));
    }
    corpus::write_file(&results_dir.join("report.md"), &md)?;
    write_json(&results_dir.join("report.json"), &reports)
}

/// Reads every `summary.json` below a results directory, in path order.
pub fn collect_summaries(results_dir: &Path) -> Result<Vec<CellSummary>, RunnerError> {
    let mut found = Vec::new();
    let mut stack = vec![results_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| io_err(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                found.push(path);
            }
        }
    }
    found.sort();
    found
        .iter()
        .map(|p| {
            let raw = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&raw).map_err(|e| io_err(p, e))
        })
        .collect()
}
