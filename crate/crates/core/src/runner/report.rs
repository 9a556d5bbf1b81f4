use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{CellSummary, Method, RunnerError};
use crate::metrics::{mean, sample_std, welch_p_value, Mark, SignificanceMark};

/// Adversarial NLI sets, each counted once in the AdvNLI average.
pub const ADVERSARIAL_DATASETS: [&str; 10] = [
    "hans", "iscs", "nan", "st", "picd", "pisp", "anli", "anli_r1", "anli_r2", "anli_r3",
];

const COLUMN_ORDER: [&str; 10] = ["snli", "hans", "iscs", "nan", "st", "picd", "pisp", "anli", "qqp", "paws"];

/// Report column a dataset falls under; the ANLI rounds share one.
pub fn column_key(dataset: &str) -> &str {
    if dataset.starts_with("anli_r") {
        "anli"
    } else {
        dataset
    }
}

pub fn column_title(key: &str) -> String {
    match key {
        "nan" => "NaN".to_string(),
        other => other.to_uppercase(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub key: String,
    pub title: String,
}

/// Accuracies are fractions; rendering multiplies by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub datasets: Vec<String>,
    /// Per-run accuracy, averaged across member datasets for merged columns.
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Welch p-value against the baseline row's cell.
    pub p_value: f64,
    pub mark: Mark,
    pub delta_vs_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub tag: Option<String>,
    pub label: String,
    /// Aligned with `ReportModel::columns`.
    pub cells: Vec<Option<ReportCell>>,
    /// Mean accuracy per underlying dataset.
    pub dataset_means: BTreeMap<String, f64>,
    /// Mean over all underlying datasets (ANLI rounds counted separately).
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub label: String,
    pub snli: f64,
    pub adv_nli: f64,
    /// `snli - adv_nli`, from unrounded values.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEntry {
    pub demo_dataset: String,
    pub tag: Option<String>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub method: Method,
    pub eval_dataset: String,
    pub entries: Vec<ShiftEntry>,
    /// Absolute accuracy change when exactly two demonstration sources are compared.
    pub abs_delta: Option<f64>,
}

/// Everything the report shows for one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportModel {
    pub eval_model: String,
    pub baseline: Method,
    pub columns: Vec<Column>,
    pub rows: Vec<ReportRow>,
    pub table2: Vec<Table2Row>,
    pub shift: Vec<ShiftRow>,
}

type RowKey = (Method, Option<String>);

fn row_label(method: Method, tag: &Option<String>) -> String {
    match tag {
        Some(t) => format!("{} [{t}]", method.title()),
        None => method.title().to_string(),
    }
}

fn merge_runs(members: &[&CellSummary]) -> Result<Vec<f64>, RunnerError> {
    let n = members[0].summary.per_run_accuracy.len();
    if members.iter().any(|c| c.summary.per_run_accuracy.len() != n) {
        return Err(RunnerError::Cell(format!(
            "{} cells on {} have different run counts",
            members[0].config.method,
            column_key(&members[0].config.eval_dataset)
        )));
    }
    Ok((0..n)
        .map(|i| mean(&members.iter().map(|c| c.summary.per_run_accuracy[i]).collect::<Vec<_>>()))
        .collect())
}

/// Groups cell summaries into one report per evaluated model, with Welch
/// significance of every cell against the `baseline` method.
pub fn aggregate(cells: &[CellSummary], baseline: Method) -> Result<Vec<ReportModel>, RunnerError> {
    let mut by_model: BTreeMap<&str, Vec<&CellSummary>> = BTreeMap::new();
    for c in cells {
        by_model.entry(c.config.eval_model.as_str()).or_default().push(c);
    }
    by_model
        .into_iter()
        .map(|(model, cells)| aggregate_model(model, &cells, baseline))
        .collect()
}

fn aggregate_model(model: &str, cells: &[&CellSummary], baseline: Method) -> Result<ReportModel, RunnerError> {
    let present: BTreeSet<&str> = cells.iter().map(|c| column_key(&c.config.eval_dataset)).collect();
    let mut keys: Vec<&str> = COLUMN_ORDER.iter().copied().filter(|k| present.contains(k)).collect();
    for c in cells {
        let k = column_key(&c.config.eval_dataset);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }

    // row -> column -> member cells
    let mut grid: BTreeMap<RowKey, BTreeMap<&str, Vec<&CellSummary>>> = BTreeMap::new();
    for c in cells {
        grid.entry((c.config.method, c.config.tag.clone()))
            .or_default()
            .entry(column_key(&c.config.eval_dataset))
            .or_default()
            .push(c);
    }
    let mut merged: BTreeMap<(RowKey, &str), Vec<f64>> = BTreeMap::new();
    for (rk, cols) in &grid {
        for (col, members) in cols {
            merged.insert((rk.clone(), *col), merge_runs(members)?);
        }
    }

    let mut rows = Vec::new();
    for (rk, cols) in &grid {
        let mut row_cells = Vec::with_capacity(keys.len());
        for key in &keys {
            let Some(members) = cols.get(key) else {
                row_cells.push(None);
                continue;
            };
            let per_run = merged[&(rk.clone(), *key)].clone();
            let base = merged
                .get(&((baseline, rk.1.clone()), *key))
                .or_else(|| merged.get(&((baseline, None), *key)))
                .ok_or_else(|| RunnerError::MissingBaseline {
                    baseline: baseline.to_string(),
                    dataset: members[0].config.eval_dataset.clone(),
                })?;
            let p_value = welch_p_value(&per_run, base)?;
            row_cells.push(Some(ReportCell {
                datasets: members.iter().map(|c| c.config.eval_dataset.clone()).collect(),
                mean: mean(&per_run),
                std: sample_std(&per_run),
                p_value,
                mark: SignificanceMark::from_p(p_value).mark,
                delta_vs_baseline: mean(&per_run) - mean(base),
                per_run,
            }));
        }
        let dataset_means: BTreeMap<String, f64> = cols
            .values()
            .flatten()
            .map(|c| (c.config.eval_dataset.clone(), c.summary.mean))
            .collect();
        let avg = mean(&dataset_means.values().copied().collect::<Vec<_>>());
        rows.push(ReportRow {
            method: rk.0,
            tag: rk.1.clone(),
            label: row_label(rk.0, &rk.1),
            cells: row_cells,
            dataset_means,
            avg,
        });
    }

    let table2 = rows
        .iter()
        .filter_map(|r| {
            let snli = *r.dataset_means.get("snli")?;
            let adv: Vec<f64> = r
                .dataset_means
                .iter()
                .filter(|(d, _)| ADVERSARIAL_DATASETS.contains(&d.as_str()))
                .map(|(_, m)| *m)
                .collect();
            if adv.is_empty() {
                return None;
            }
            let adv_nli = mean(&adv);
            Some(Table2Row {
                label: r.label.clone(),
                snli,
                adv_nli,
                delta: snli - adv_nli,
            })
        })
        .collect();

    let mut by_target: BTreeMap<(Method, &str), Vec<&CellSummary>> = BTreeMap::new();
    for c in cells {
        by_target
            .entry((c.config.method, c.config.eval_dataset.as_str()))
            .or_default()
            .push(c);
    }
    let shift = by_target
        .into_iter()
        .filter(|(_, cs)| {
            cs.iter()
                .map(|c| c.config.demo_dataset.as_str())
                .collect::<BTreeSet<_>>()
                .len()
                > 1
        })
        .map(|((method, eval), cs)| {
            let entries: Vec<ShiftEntry> = cs
                .iter()
                .map(|c| ShiftEntry {
                    demo_dataset: c.config.demo_dataset.clone(),
                    tag: c.config.tag.clone(),
                    mean: c.summary.mean,
                })
                .collect();
            let abs_delta = (entries.len() == 2).then(|| (entries[0].mean - entries[1].mean).abs());
            ShiftRow {
                method,
                eval_dataset: eval.to_string(),
                entries,
                abs_delta,
            }
        })
        .collect();

    Ok(ReportModel {
        eval_model: model.to_string(),
        baseline,
        columns: keys
            .iter()
            .map(|k| Column {
                key: k.to_string(),
                title: column_title(k),
            })
            .collect(),
        rows,
        table2,
        shift,
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// Markdown rendering: per model, a dataset table (mean with its significance
/// mark, standard deviation on the line below), the SNLI/AdvNLI table when
/// both are present, and the demonstration-shift table.
pub fn render_markdown(reports: &[ReportModel]) -> String {
    let mut out = String::from("# Results\n");
    if reports.is_empty() {
        out.push_str("\nNo completed cells.\n");
        return out;
    }
    for r in reports {
        out.push_str(&format!("\n## {}\n\n", r.eval_model));
        out.push_str(&format!(
            "Accuracy (%) over runs; std below. {} p < {}, {} p < {} (Welch's t-test against {}).\n\n",
            Mark::Strong.symbol(),
            SignificanceMark::STRONG,
            Mark::Weak.symbol(),
            SignificanceMark::WEAK,
            r.baseline.title()
        ));
        out.push_str("| Method |");
        for c in &r.columns {
            out.push_str(&format!(" {} |", c.title));
        }
        out.push_str(" Avg. |\n|---|");
        for _ in &r.columns {
            out.push_str("---|");
        }
        out.push_str("---|\n");
        for row in &r.rows {
            out.push_str(&format!("| {} |", row.label));
            for c in &row.cells {
                match c {
                    Some(c) => out.push_str(&format!(" {}{} |", pct(c.mean), c.mark.symbol())),
                    None => out.push_str(" - |"),
                }
            }
            out.push_str(&format!(" {} |\n|  |", pct(row.avg)));
            for c in &row.cells {
                match c {
                    Some(c) => out.push_str(&format!(" ±{} |", pct(c.std))),
                    None => out.push_str("  |"),
                }
            }
            out.push_str("  |\n");
        }
        if !r.table2.is_empty() {
            out.push_str("\n| Method | SNLI | AdvNLI | Δ |\n|---|---|---|---|\n");
            for t in &r.table2 {
                out.push_str(&format!(
                    "| {} | {} | {} | {} |\n",
                    t.label,
                    pct(t.snli),
                    pct(t.adv_nli),
                    pct(t.delta)
                ));
            }
        }
        if !r.shift.is_empty() {
            out.push_str("\n| Method | Eval | Demonstrations | Accuracy | abs Δ |\n|---|---|---|---|---|\n");
            for s in &r.shift {
                for (i, e) in s.entries.iter().enumerate() {
                    let delta = match (i, s.abs_delta) {
                        (0, Some(d)) => pct(d),
                        _ => String::new(),
                    };
                    out.push_str(&format!(
                        "| {} | {} | {} | {} | {} |\n",
                        s.method.title(),
                        column_title(&s.eval_dataset),
                        e.demo_dataset,
                        pct(e.mean),
                        delta
                    ));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::AccuracySummary;
    use crate::runner::RunConfig;

    fn cell(method: Method, dataset: &str, runs: &[f64]) -> CellSummary {
        CellSummary {
            config: RunConfig::new(method, "m", "esnli", dataset),
            config_hash: String::new(),
            summary: AccuracySummary::from_runs(dataset, method.as_str(), runs.to_vec()),
        }
    }

    #[test]
    fn anli_rounds_merge_per_run() {
        let cells = vec![
            cell(Method::Icl, "anli_r1", &[0.4, 0.5]),
            cell(Method::Icl, "anli_r2", &[0.6, 0.7]),
            cell(Method::Icl, "snli", &[0.8, 0.9]),
        ];
        let r = &aggregate(&cells, Method::Icl).unwrap()[0];
        assert_eq!(r.columns.iter().map(|c| c.key.as_str()).collect::<Vec<_>>(), ["snli", "anli"]);
        let anli = r.rows[0].cells[1].as_ref().unwrap();
        assert_eq!(anli.per_run, vec![0.5, 0.6]);
        assert!((r.rows[0].avg - (0.45 + 0.65 + 0.85) / 3.0).abs() < 1e-12);
        let t2 = &r.table2[0];
        assert!((t2.adv_nli - 0.55).abs() < 1e-12);
        assert!((t2.delta - 0.3).abs() < 1e-12);
    }

    #[test]
    fn identical_to_baseline_has_no_marks() {
        let cells = vec![
            cell(Method::Icl, "snli", &[0.5, 0.6, 0.7]),
            cell(Method::XiclHuman, "snli", &[0.5, 0.6, 0.7]),
        ];
        let r = &aggregate(&cells, Method::Icl).unwrap()[0];
        for row in &r.rows {
            let c = row.cells[0].as_ref().unwrap();
            assert_eq!(c.mark, Mark::None);
            assert_eq!(c.delta_vs_baseline, 0.0);
            assert_eq!(c.p_value, 1.0);
        }
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let cells = vec![cell(Method::XiclHuman, "snli", &[0.5, 0.6])];
        assert!(matches!(
            aggregate(&cells, Method::Icl),
            Err(RunnerError::MissingBaseline { dataset, .. }) if dataset == "snli"
        ));
    }

    #[test]
    fn markdown_layout() {
        let cells = vec![
            cell(Method::Icl, "snli", &[0.5, 0.52, 0.51, 0.49]),
            cell(Method::XiclHuman, "snli", &[0.9, 0.91, 0.92, 0.9]),
            cell(Method::Icl, "hans", &[0.5, 0.5, 0.6, 0.6]),
            cell(Method::XiclHuman, "hans", &[0.5, 0.5, 0.6, 0.6]),
        ];
        let md = render_markdown(&aggregate(&cells, Method::Icl).unwrap());
        assert!(md.contains("| Method | SNLI | HANS | Avg. |"), "{md}");
        assert!(md.contains("| X-ICL (Human) | 90.8▼ | 55.0 | 72.9 |"), "{md}");
        assert!(md.contains("|  | ±1.0 | ±5.8 |  |"), "{md}");
        assert!(md.contains("| ICL | 50.5 | 55.0 | -4.5 |"), "{md}");
    }

    #[test]
    fn shift_rows_pair_sources() {
        let mut a = cell(Method::Icl, "anli_r1", &[0.4, 0.5]);
        a.config.tag = Some("from_esnli".into());
        let mut b = cell(Method::Icl, "anli_r1", &[0.6, 0.7]);
        b.config.demo_dataset = "anli_train".into();
        b.config.tag = Some("from_anli".into());
        let r = &aggregate(&[a, b], Method::Icl).unwrap()[0];
        assert_eq!(r.shift.len(), 1);
        assert!((r.shift[0].abs_delta.unwrap() - 0.2).abs() < 1e-12);
    }
}
