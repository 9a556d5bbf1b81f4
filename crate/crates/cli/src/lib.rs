//! `xicl` subcommands. Everything except `ingest`, `report` and
//! `serve-annotate` reads a suite file for its backend, cache, datasets and banks.

pub mod analyze;
pub mod annotate;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use xicl_core::corpus::{self, shipped, Dataset, Label, NleMode, NleRecord, Split, TaskKind};
use xicl_core::llm::LlmClient;
use xicl_core::metrics::extractable_probe;
use xicl_core::nlegen::{build_fewshot_demos, generate, NleGenJob};
use xicl_core::runner::{
    aggregate, collect_summaries, run_suite, suite_client, write_report, Method, SuiteConfig, SuiteContext,
    SuiteOutcome, SuiteOverrides,
};

#[derive(Debug, Parser)]
#[command(name = "xicl", version, about = "Explanation-augmented in-context learning experiments")]
pub struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset file (and NLE banks over it) and print its digest.
    Ingest(IngestArgs),
    /// Generate model NLEs for a suite dataset.
    GenNles(GenNlesArgs),
    /// Run every cell of a suite and write the report.
    Run(RunArgs),
    /// Run the NLE-perturbation cells of a suite next to their unperturbed counterparts.
    Ablate(RunArgs),
    /// ROUGE-L and length statistics of NLE banks.
    Analyze(AnalyzeArgs),
    /// Re-render the report from an existing results directory.
    Report(ReportArgs),
    /// Prefix-completion memorization probe on a suite dataset.
    ProbeMemorization(ProbeArgs),
    /// Serve the human-evaluation API (and optionally the UI bundle).
    ServeAnnotate(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub task: TaskKind,
    /// Dataset name; defaults to the file name stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub split: Option<Split>,
    /// NLE bank files whose ids must resolve in the dataset.
    #[arg(long)]
    pub bank: Vec<PathBuf>,
    /// Write the canonical serialization here.
    #[arg(long)]
    pub canonical: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GenMode {
    ZeroShot,
    FewShot,
    ZeroShotShort,
}

impl From<GenMode> for NleMode {
    fn from(m: GenMode) -> Self {
        match m {
            GenMode::ZeroShot => NleMode::ZeroShot,
            GenMode::FewShot => NleMode::FewShot,
            GenMode::ZeroShotShort => NleMode::ZeroShotShort,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenNlesArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Suite dataset to explain (gold labels).
    #[arg(long)]
    pub dataset: String,
    #[arg(long, value_enum)]
    pub mode: GenMode,
    #[arg(long)]
    pub generator: String,
    /// Suite dataset and human bank for few-shot demonstrations; defaults to
    /// the shipped reference set of the dataset's task.
    #[arg(long, requires = "fewshot_bank")]
    pub fewshot_dataset: Option<String>,
    #[arg(long, requires = "fewshot_dataset")]
    pub fewshot_bank: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only the first N instances.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args, Default)]
pub struct BackendArgs {
    /// Replace the suite's backend (`openai`, `mock`, `replay`).
    #[arg(long)]
    pub backend: Option<String>,
    /// Replace the suite's cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long)]
    pub results_dir: Option<PathBuf>,
    /// Only run cells with these methods (repeatable).
    #[arg(long)]
    pub method: Vec<Method>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Suite banks to analyze (repeatable); all banks by default.
    #[arg(long)]
    pub bank: Vec<String>,
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, default_value = "results")]
    pub results_dir: PathBuf,
    #[arg(long, default_value = "icl")]
    pub baseline: Method,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: String,
    /// Defaults to the suite's eval_model.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub cap: Option<usize>,
    /// Write the per-instance flags here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides `bind` from the config.
    #[arg(long)]
    pub bind: Option<std::net::SocketAddr>,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Ingest(a) => ingest(&a).map(|_| 0),
        Command::GenNles(a) => gen_nles(&a),
        Command::Run(a) => run_cells(&a, None),
        Command::Ablate(a) => run_cells(
            &a,
            Some(&[
                Method::Icl,
                Method::XiclHuman,
                Method::XiclFs,
                Method::XiclFsSwap,
                Method::XiclHumanRand,
            ]),
        ),
        Command::Analyze(a) => {
            let suite = SuiteConfig::load(&a.config)?;
            let summary = analyze::analyze_suite(&suite, &a.bank, &a.out)?;
            print!("{}", analyze::render_table(&summary));
            Ok(0)
        }
        Command::Report(a) => {
            let cells = collect_summaries(&a.results_dir)?;
            let (reports, error) = match aggregate(&cells, a.baseline) {
                Ok(r) => (r, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            write_report(&a.results_dir, &reports, error.as_deref())?;
            print!("{}", std::fs::read_to_string(a.results_dir.join("report.md"))?);
            Ok(if error.is_some() { 1 } else { 0 })
        }
        Command::ProbeMemorization(a) => probe(&a),
        Command::ServeAnnotate(a) => {
            let cfg = annotate::AnnotateConfig::load(&a.config)?;
            let mut serve = cfg.prepare()?;
            if let Some(bind) = a.bind {
                serve.bind = bind;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(xicl_annotate::serve(serve))?;
            Ok(0)
        }
    }
}

#[derive(Debug, Serialize)]
pub struct IngestReport {
    pub name: String,
    pub split: Split,
    pub task: TaskKind,
    pub instances: usize,
    pub labels: BTreeMap<Label, usize>,
    pub digest: String,
    pub banks: Vec<BankReport>,
}

#[derive(Debug, Serialize)]
pub struct BankReport {
    pub path: PathBuf,
    pub records: usize,
    /// Counts per `source/mode/generator`.
    pub bindings: BTreeMap<String, usize>,
    pub digest: String,
}

pub fn ingest(a: &IngestArgs) -> Result<IngestReport> {
    let mut ds = corpus::load_dataset(&a.data, a.task).with_context(|| format!("loading {}", a.data.display()))?;
    if let Some(n) = &a.name {
        ds.name = n.clone();
    }
    if let Some(s) = a.split {
        ds.split = s;
    }
    let mut labels = BTreeMap::new();
    for i in &ds.instances {
        *labels.entry(i.gold_label).or_insert(0) += 1;
    }
    let mut banks = Vec::new();
    for path in &a.bank {
        let records = corpus::load_nle_bank(path, &ds).with_context(|| format!("loading {}", path.display()))?;
        let mut bindings = BTreeMap::new();
        for r in &records {
            *bindings.entry(binding_name(r)).or_insert(0) += 1;
        }
        banks.push(BankReport {
            path: path.clone(),
            records: records.len(),
            bindings,
            digest: corpus::bank_digest(&records),
        });
    }
    if let Some(out) = &a.canonical {
        corpus::write_file(out, &corpus::serialize_dataset(&ds))?;
    }
    let report = IngestReport {
        name: ds.name.clone(),
        split: ds.split,
        task: ds.task,
        instances: ds.len(),
        labels,
        digest: corpus::dataset_digest(&ds),
        banks,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report)
}

/// `source/mode/generator` with the serialized enum names.
pub fn binding_name(r: &NleRecord) -> String {
    let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
    format!(
        "{}/{}/{}",
        name(serde_json::json!(r.source)),
        name(serde_json::json!(r.mode)),
        r.generator
    )
}

fn overrides(b: &BackendArgs) -> SuiteOverrides {
    SuiteOverrides {
        cache: b.cache.clone(),
        backend: b.backend.clone(),
        ..Default::default()
    }
}

/// Suite, client and loaded data for the commands that call a model outside a cell.
fn open_suite(config: &Path, b: &BackendArgs) -> Result<(SuiteConfig, Arc<LlmClient>, SuiteContext)> {
    let mut suite = SuiteConfig::load(config)?;
    if let Some(name) = &b.backend {
        suite.backend.endpoint = Some(suite.backend.endpoint_id());
        suite.backend.backend = name.clone();
    }
    let client = suite_client(&suite, b.cache.as_deref())?;
    let ctx = SuiteContext::load(&suite, client.clone())?;
    Ok((suite, client, ctx))
}

fn suite_dataset<'a>(ctx: &'a SuiteContext, name: &str) -> Result<&'a Dataset> {
    ctx.datasets
        .get(name)
        .with_context(|| format!("suite has no dataset {name}"))
}

pub fn run_cells(a: &RunArgs, default_methods: Option<&[Method]>) -> Result<i32> {
    let mut ov = overrides(&a.backend);
    ov.results_dir = a.results_dir.clone();
    ov.methods = if a.method.is_empty() {
        default_methods.map(<[Method]>::to_vec)
    } else {
        Some(a.method.clone())
    };
    let outcome = run_suite(&a.config, &ov)?;
    print_outcome(&outcome);
    Ok(outcome.exit_code())
}

fn print_outcome(o: &SuiteOutcome) {
    for c in &o.completed {
        println!(
            "ok       {:<48} {:.1} ± {:.1}",
            c.config.id(),
            c.summary.mean * 100.0,
            c.summary.std * 100.0
        );
    }
    for (cfg, err) in &o.aborted {
        println!("aborted  {:<48} {err}", cfg.id());
    }
    if let Some(e) = &o.report_error {
        println!("report incomplete: {e}");
    }
    println!("report: {}", o.results_dir.join("report.md").display());
}

pub fn gen_nles(a: &GenNlesArgs) -> Result<i32> {
    let (_, client, ctx) = open_suite(&a.config, &a.backend)?;
    let ds = suite_dataset(&ctx, &a.dataset)?;
    let targets = ds
        .instances
        .iter()
        .take(a.cap.unwrap_or(usize::MAX))
        .map(|i| (i.clone(), i.gold_label))
        .collect();
    let mode = NleMode::from(a.mode);
    let demos = match mode {
        NleMode::FewShot => {
            let (train, bank) = match (&a.fewshot_dataset, &a.fewshot_bank) {
                (Some(d), Some(b)) => (
                    suite_dataset(&ctx, d)?.clone(),
                    ctx.banks
                        .get(b)
                        .with_context(|| format!("suite has no bank {b}"))?
                        .clone(),
                ),
                _ => match ds.task {
                    TaskKind::Nli => shipped::esnli_fewshot(),
                    TaskKind::Paraphrase => shipped::qqp_fewshot(),
                },
            };
            build_fewshot_demos(&train, &bank, a.seed)?
        }
        _ => Vec::new(),
    };
    let mut job = NleGenJob::new(mode, &a.generator, ds.task, targets, demos);
    if mode == NleMode::FewShot {
        job.seed = Some(a.seed);
    }
    let out = generate(&job, &client)?;
    corpus::write_file(&a.out, &corpus::serialize_nle_bank(&out.records))?;
    let manifest_path = a
        .manifest
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest.json", a.out.display())));
    corpus::write_file(&manifest_path, &serde_json::to_string_pretty(&out.manifest)?)?;
    let failed = out.manifest.failures().count();
    let empty = out.manifest.flagged_empty().count();
    println!(
        "{} NLEs written to {} ({failed} failed, {empty} empty)",
        out.records.len(),
        a.out.display()
    );
    Ok(if failed > 0 { 1 } else { 0 })
}

pub fn probe(a: &ProbeArgs) -> Result<i32> {
    let (suite, client, ctx) = open_suite(&a.config, &a.backend)?;
    let mut ds = suite_dataset(&ctx, &a.dataset)?.clone();
    if let Some(cap) = a.cap {
        ds.instances.truncate(cap);
    }
    let Some(model) = a.model.clone().or(suite.eval_model.clone()) else {
        bail!("no --model given and the suite has no eval_model");
    };
    let result = extractable_probe(&ds, &client, &model);
    if let Some(out) = &a.out {
        corpus::write_file(out, &serde_json::to_string_pretty(&result)?)?;
    }
    println!(
        "{model} on {}: {}/{} extractable ({:.4}%)",
        ds.name,
        result.extractable,
        result.evaluated,
        result.rate * 100.0
    );
    Ok(0)
}
