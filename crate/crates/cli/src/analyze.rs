//! NLE analyses: ROUGE-L of each NLE against its instance text and length
//! statistics, grouped by bank and `source/mode/generator`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use xicl_core::corpus::{self, merge_instance_text, Dataset, NleRecord};
use xicl_core::llm::mock::MockBackend;
use xicl_core::llm::{LlmClient, WireError};
use xicl_core::metrics::{nle_length_stats, rouge_l, Distribution, LengthStats, RougeL};
use xicl_core::runner::{BankSpec, SuiteConfig, SuiteContext};
use xicl_core::text::tokenize;

use crate::binding_name;

pub const ROUGE_SETTINGS: &str =
    "sentence-level ROUGE-L over tokenizer tokens, no stemming or stopword removal; reference = text_a + ' ' + text_b";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NleAnalysis {
    pub bank: String,
    pub binding: String,
    pub instance_id: String,
    pub words: usize,
    pub rouge: RougeL,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub bank: String,
    pub binding: String,
    pub length: LengthStats,
    pub rouge_precision: Distribution,
    pub rouge_recall: Distribution,
    pub rouge_f1: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub settings: String,
    pub groups: Vec<GroupSummary>,
}

pub fn analyze_bank(bank: &str, dataset: &Dataset, records: &[NleRecord]) -> Result<Vec<NleAnalysis>> {
    let index = dataset.id_index();
    records
        .iter()
        .map(|r| {
            let inst = index
                .get(r.instance_id.as_str())
                .with_context(|| format!("bank {bank}: {} not in {}", r.instance_id, dataset.name))?;
            let (prefix, suffix) = merge_instance_text(inst);
            Ok(NleAnalysis {
                bank: bank.to_string(),
                binding: binding_name(r),
                instance_id: r.instance_id.clone(),
                words: tokenize(&r.text).len(),
                rouge: rouge_l(&format!("{prefix} {suffix}"), &r.text),
            })
        })
        .collect()
}

pub fn summarize(bank: &str, records: &[NleRecord], rows: &[NleAnalysis]) -> Result<Vec<GroupSummary>> {
    let mut groups: BTreeMap<String, (Vec<NleRecord>, Vec<&NleAnalysis>)> = BTreeMap::new();
    for (r, a) in records.iter().zip(rows) {
        let g = groups.entry(a.binding.clone()).or_default();
        g.0.push(r.clone());
        g.1.push(a);
    }
    groups
        .into_iter()
        .map(|(binding, (recs, rows))| {
            let col = |f: fn(&RougeL) -> f64| rows.iter().map(|a| f(&a.rouge)).collect::<Vec<_>>();
            Ok(GroupSummary {
                bank: bank.to_string(),
                binding,
                length: nle_length_stats(&recs)?,
                rouge_precision: Distribution::of(&col(|r| r.precision))?,
                rouge_recall: Distribution::of(&col(|r| r.recall))?,
                rouge_f1: Distribution::of(&col(|r| r.f1))?,
            })
        })
        .collect()
}

/// Writes `nles.jsonl` and `summary.json` under `out`.
pub fn analyze_suite(suite: &SuiteConfig, banks: &[String], out: &Path) -> Result<AnalysisSummary> {
    let ctx = SuiteContext::load(suite, Arc::new(offline_client()))?;
    let wanted: Vec<&BankSpec> = if banks.is_empty() {
        suite.banks.iter().collect()
    } else {
        banks
            .iter()
            .map(|b| {
                suite
                    .banks
                    .iter()
                    .find(|s| &s.name == b)
                    .with_context(|| format!("suite has no bank {b}"))
            })
            .collect::<Result<_>>()?
    };
    let mut lines = String::new();
    let mut groups = Vec::new();
    for spec in wanted {
        let records = &ctx.banks[&spec.name];
        if records.is_empty() {
            continue;
        }
        let rows = analyze_bank(&spec.name, &ctx.datasets[&spec.dataset], records)?;
        for r in &rows {
            writeln!(lines, "{}", serde_json::to_string(r)?)?;
        }
        groups.extend(summarize(&spec.name, records, &rows)?);
    }
    let summary = AnalysisSummary {
        settings: ROUGE_SETTINGS.to_string(),
        groups,
    };
    let out = suite.resolve_path(out);
    corpus::write_file(&out.join("nles.jsonl"), &lines)?;
    corpus::write_file(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Analyses never call a model; the client only satisfies the context.
fn offline_client() -> LlmClient {
    LlmClient::builder(Box::new(MockBackend::from_fn(|_| Err(WireError::Refused)))).build()
}

pub fn render_table(s: &AnalysisSummary) -> String {
    let mut out = String::from(
        "| Bank | NLEs | Source/mode/generator | Mean words | Median | ROUGE-L P | ROUGE-L R | ROUGE-L F |\n|---|---|---|---|---|---|---|---|\n",
    );
    for g in &s.groups {
        writeln!(
            out,
            "| {} | {} | {} | {:.1} | {:.1} | {:.3} | {:.3} | {:.3} |",
            g.bank,
            g.length.count,
            g.binding,
            g.length.mean_words,
            g.length.median,
            g.rouge_precision.mean,
            g.rouge_recall.mean,
            g.rouge_f1.mean
        )
        .unwrap();
    }
    out
}
