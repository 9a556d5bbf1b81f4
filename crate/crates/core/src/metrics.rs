//! Accuracy, Welch's t-test, ROUGE-L, NLE length statistics and the
//! memorization probe.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corpus::{merge_instance_text, Dataset, Label, NleRecord};
use crate::llm::{ChatRequest, Decoding, LlmClient};
use crate::prompting::ParsedCompletion;
use crate::text::{normalize_whitespace, tokenize};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {preds} predictions, {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("empty input")]
    EmptySet,
    #[error("need at least two observations per sample, got {0} and {1}")]
    TooFewSamples(usize, usize),
    /// Both samples have zero variance. `p` carries the convention:
    /// 1 when the means agree, 0 when they differ.
    #[error("both samples have zero variance (conventional p = {p})")]
    DegenerateSamples { t: f64, p: f64 },
}

pub fn accuracy(preds: &[ParsedCompletion], golds: &[Label]) -> Result<f64, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.label == Some(**g))
        .count();
    Ok(correct as f64 / golds.len() as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n − 1 denominator).
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub dataset: String,
    pub method: String,
    pub per_run_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AccuracySummary {
    pub fn from_runs(dataset: &str, method: &str, per_run_accuracy: Vec<f64>) -> Self {
        AccuracySummary {
            dataset: dataset.to_string(),
            method: method.to_string(),
            mean: mean(&per_run_accuracy),
            std: sample_std(&per_run_accuracy),
            per_run_accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Two-sided Welch's unequal-variances t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::TooFewSamples(a.len(), b.len()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let diff = mean(a) - mean(b);
    if va + vb == 0.0 {
        return Err(if diff == 0.0 {
            MetricsError::DegenerateSamples { t: 0.0, p: 1.0 }
        } else {
            MetricsError::DegenerateSamples {
                t: diff.signum() * f64::INFINITY,
                p: 0.0,
            }
        });
    }
    let t = diff / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va.powi(2) / (na - 1.0) + vb.powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchTest { t, df, p })
}

/// p-value of a Welch test, applying the degenerate-sample conventions.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    match welch_t_test(a, b) {
        Ok(w) => Ok(w.p),
        Err(MetricsError::DegenerateSamples { p, .. }) => Ok(p),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Strong,
    Weak,
    None,
}

impl Mark {
    pub fn symbol(self) -> &'static str {
        match self {
            Mark::Strong => "▼",
            Mark::Weak => "▽",
            Mark::None => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceMark {
    pub p_value: f64,
    pub mark: Mark,
}

impl SignificanceMark {
    pub const STRONG: f64 = 1e-3;
    pub const WEAK: f64 = 1e-1;

    pub fn from_p(p_value: f64) -> Self {
        let mark = if p_value < Self::STRONG {
            Mark::Strong
        } else if p_value < Self::WEAK {
            Mark::Weak
        } else {
            Mark::None
        };
        SignificanceMark { p_value, mark }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_tokens<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> RougeL {
    if reference.is_empty() || hypothesis.is_empty() {
        return RougeL {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let l = lcs_len(reference, hypothesis) as f64;
    let precision = l / hypothesis.len() as f64;
    let recall = l / reference.len() as f64;
    let f1 = if l == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeL {
        precision,
        recall,
        f1,
    }
}

pub fn rouge_l(reference: &str, hypothesis: &str) -> RougeL {
    rouge_l_tokens(&tokenize(reference), &tokenize(hypothesis))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// Inclusive lower bound.
    pub start: usize,
    /// Exclusive upper bound.
    pub end: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub count: usize,
    pub mean_words: f64,
    pub median: f64,
    pub histogram: Vec<HistogramBucket>,
}

pub const LENGTH_BUCKET_WIDTH: usize = 5;

pub fn nle_length_stats(records: &[NleRecord]) -> Result<LengthStats, MetricsError> {
    let lengths: Vec<usize> = records.iter().map(|r| tokenize(&r.text).len()).collect();
    if lengths.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let as_f: Vec<f64> = lengths.iter().map(|&n| n as f64).collect();
    let max = *lengths.iter().max().unwrap();
    let mut histogram: Vec<HistogramBucket> = (0..=max / LENGTH_BUCKET_WIDTH)
        .map(|i| HistogramBucket {
            start: i * LENGTH_BUCKET_WIDTH,
            end: (i + 1) * LENGTH_BUCKET_WIDTH,
            count: 0,
        })
        .collect();
    for n in &lengths {
        histogram[n / LENGTH_BUCKET_WIDTH].count += 1;
    }
    Ok(LengthStats {
        count: lengths.len(),
        mean_words: mean(&as_f),
        median: quantile(&as_f, 0.5),
        histogram,
    })
}

/// Linear-interpolation quantile of unsorted data (`q` in [0, 1]).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Five-number summary plus mean, for violin-style plots emitted as data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Distribution {
    pub fn of(xs: &[f64]) -> Result<Self, MetricsError> {
        if xs.is_empty() {
            return Err(MetricsError::EmptySet);
        }
        Ok(Distribution {
            n: xs.len(),
            min: quantile(xs, 0.0),
            q1: quantile(xs, 0.25),
            median: quantile(xs, 0.5),
            q3: quantile(xs, 0.75),
            max: quantile(xs, 1.0),
            mean: mean(xs),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFlag {
    pub instance_id: String,
    /// `None` when the completion failed; such instances leave the denominator.
    pub extractable: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub model: String,
    pub evaluated: usize,
    pub extractable: usize,
    pub rate: f64,
    pub flags: Vec<ProbeFlag>,
}

impl ProbeResult {
    pub fn extractable_ids(&self) -> Vec<&str> {
        self.flags
            .iter()
            .filter(|f| f.extractable == Some(true))
            .map(|f| f.instance_id.as_str())
            .collect()
    }
}

/// Prompts the model with each instance's prefix (`text_a`) and flags the
/// instance when the completion starts with the exact suffix (`text_b`).
pub fn extractable_probe(dataset: &Dataset, client: &LlmClient, model: &str) -> ProbeResult {
    let merged: Vec<(String, String)> = dataset.instances.iter().map(merge_instance_text).collect();
    let reqs: Vec<ChatRequest> = merged
        .iter()
        .map(|(prefix, _)| ChatRequest::prompt(model, prefix.clone(), Decoding::CLASSIFICATION))
        .collect();
    let responses = client.complete_many(&reqs);
    let flags: Vec<ProbeFlag> = dataset
        .instances
        .iter()
        .zip(&merged)
        .zip(responses)
        .map(|((inst, (_, suffix)), resp)| match resp {
            Ok(r) => ProbeFlag {
                instance_id: inst.id.clone(),
                extractable: Some(normalize_whitespace(&r.text).starts_with(suffix.as_str())),
                error: None,
            },
            Err(e) => {
                tracing::warn!(instance = %inst.id, "probe completion failed: {e}");
                ProbeFlag {
                    instance_id: inst.id.clone(),
                    extractable: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let evaluated = flags.iter().filter(|f| f.extractable.is_some()).count();
    let extractable = flags.iter().filter(|f| f.extractable == Some(true)).count();
    ProbeResult {
        model: model.to_string(),
        evaluated,
        extractable,
        rate: if evaluated == 0 {
            0.0
        } else {
            extractable as f64 / evaluated as f64
        },
        flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parsed(label: Option<Label>) -> ParsedCompletion {
        ParsedCompletion {
            label,
            nle: None,
            raw: String::new(),
        }
    }

    #[test]
    fn accuracy_cases() {
        let golds = [Label::Entailment, Label::Neutral, Label::Contradiction, Label::Neutral];
        let preds = [
            parsed(Some(Label::Entailment)),
            parsed(Some(Label::Neutral)),
            parsed(Some(Label::Neutral)),
            parsed(None),
        ];
        assert_eq!(accuracy(&preds, &golds).unwrap(), 0.5);
        let none: Vec<_> = golds.iter().map(|_| parsed(None)).collect();
        assert_eq!(accuracy(&none, &golds).unwrap(), 0.0);
        let all: Vec<_> = golds.iter().map(|g| parsed(Some(*g))).collect();
        assert_eq!(accuracy(&all, &golds).unwrap(), 1.0);
        assert!(matches!(
            accuracy(&all[..2], &golds),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::EmptySet));
    }

    #[test]
    fn welch_matches_reference_values() {
        // Reference values from scipy.stats.ttest_ind(equal_var=False).
        let w = welch_t_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((w.t - -1.0954451150103324).abs() < 1e-12);
        assert!((w.df - 6.0).abs() < 1e-12);
        assert!((w.p - 0.3153335962012296).abs() < 1e-9);

        let w = welch_t_test(&[1.5, 2.25, 9.0, 4.0, 4.1], &[2.0, 3.0]).unwrap();
        assert!((w.t - 1.1931920141379095).abs() < 1e-12);
        assert!((w.df - 4.841487242622218).abs() < 1e-9);
        assert!((w.p - 0.28796635249821856).abs() < 1e-9);

        let w = welch_t_test(&[0.671, 0.66, 0.68, 0.672], &[0.75, 0.74, 0.73, 0.748]).unwrap();
        assert!((w.t - -11.625392484384037).abs() < 1e-9);
        assert!((w.p - 2.6175038165834363e-05).abs() < 1e-12);
    }

    #[test]
    fn welch_identity_and_degenerate_cases() {
        let a = [0.2, 0.4, 0.5];
        let w = welch_t_test(&a, &a).unwrap();
        assert_eq!(w.t, 0.0);
        assert!((w.p - 1.0).abs() < 1e-12);
        assert_eq!(
            welch_t_test(&[1.0, 1.0], &[1.0, 1.0]),
            Err(MetricsError::DegenerateSamples { t: 0.0, p: 1.0 })
        );
        assert!(matches!(
            welch_t_test(&[1.0, 1.0], &[2.0, 2.0]),
            Err(MetricsError::DegenerateSamples { p, .. }) if p == 0.0
        ));
        assert_eq!(welch_p_value(&[1.0, 1.0], &[2.0, 2.0]), Ok(0.0));
        assert!(matches!(welch_t_test(&[1.0], &[1.0, 2.0]), Err(MetricsError::TooFewSamples(1, 2))));
    }

    #[test]
    fn significance_thresholds_are_strict() {
        assert_eq!(SignificanceMark::from_p(0.0009).mark, Mark::Strong);
        assert_eq!(SignificanceMark::from_p(0.001).mark, Mark::Weak);
        assert_eq!(SignificanceMark::from_p(0.0999).mark, Mark::Weak);
        assert_eq!(SignificanceMark::from_p(0.1).mark, Mark::None);
        assert_eq!(Mark::Strong.symbol(), "▼");
        assert_eq!(Mark::Weak.symbol(), "▽");
    }

    #[test]
    fn rouge_cases() {
        let r = rouge_l("a b c d", "a c d e");
        assert_eq!((r.precision, r.recall, r.f1), (0.75, 0.75, 0.75));
        assert_eq!(rouge_l("x y", "x y").f1, 1.0);
        assert_eq!(rouge_l("x y", "z w").f1, 0.0);
        assert_eq!(rouge_l("", "z w").recall, 0.0);
    }

    #[test]
    fn length_stats() {
        let words27 = (0..27).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let s = nle_length_stats(&[NleRecord::human("a", words27)]).unwrap();
        assert_eq!(s.mean_words, 27.0);
        assert_eq!(s.histogram.last().unwrap(), &HistogramBucket { start: 25, end: 30, count: 1 });
        let recs = [NleRecord::human("a", "x y"), NleRecord::human("b", "x y z w")];
        let s = nle_length_stats(&recs).unwrap();
        assert_eq!((s.mean_words, s.median), (3.0, 3.0));
        let doubled: Vec<NleRecord> = recs.iter().chain(recs.iter()).cloned().collect();
        let d = nle_length_stats(&doubled).unwrap();
        assert_eq!((d.mean_words, d.median), (3.0, 3.0));
        assert_eq!(nle_length_stats(&[]), Err(MetricsError::EmptySet));
    }

    #[test]
    fn quartiles_interpolate() {
        let d = Distribution::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((d.min, d.q1, d.median, d.q3, d.max), (1.0, 1.75, 2.5, 3.25, 4.0));
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = AccuracySummary::from_runs("snli", "icl", vec![0.5, 0.7]);
        assert!((s.mean - 0.6).abs() < 1e-12);
        assert!((s.std - 0.1414213562373095).abs() < 1e-12);
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 2..12)
    }

    proptest! {
        #[test]
        fn welch_is_antisymmetric(a in sample(), b in sample()) {
            if let (Ok(x), Ok(y)) = (welch_t_test(&a, &b), welch_t_test(&b, &a)) {
                prop_assert!((x.t + y.t).abs() <= 1e-9 * (1.0 + x.t.abs()));
                prop_assert!((x.p - y.p).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&x.p));
            }
        }

        #[test]
        fn welch_is_scale_invariant(a in sample(), b in sample(), c in 0.01f64..100.0) {
            let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
            if let (Ok(x), Ok(y)) = (welch_t_test(&a, &b), welch_t_test(&sa, &sb)) {
                prop_assert!((x.t - y.t).abs() <= 1e-6 * (1.0 + x.t.abs()));
                prop_assert!((x.p - y.p).abs() < 1e-6);
            }
        }

        #[test]
        fn rouge_swap_exchanges_precision_and_recall(
            a in prop::collection::vec(0u8..5, 0..10),
            b in prop::collection::vec(0u8..5, 0..10),
        ) {
            let x = rouge_l_tokens(&a, &b);
            let y = rouge_l_tokens(&b, &a);
            prop_assert_eq!(x.precision, y.recall);
            prop_assert_eq!(x.recall, y.precision);
            prop_assert!((x.f1 - y.f1).abs() < 1e-12);
        }

        #[test]
        fn accuracy_is_permutation_invariant(
            pairs in prop::collection::vec((0usize..3, 0usize..4), 1..30).prop_shuffle(),
        ) {
            let labels = [Label::Entailment, Label::Neutral, Label::Contradiction];
            let preds: Vec<_> = pairs.iter().map(|(_, p)| parsed(labels.get(*p).copied())).collect();
            let golds: Vec<_> = pairs.iter().map(|(g, _)| labels[*g]).collect();
            let mut rp: Vec<_> = preds.clone();
            let mut rg: Vec<_> = golds.clone();
            rp.reverse();
            rg.reverse();
            prop_assert_eq!(accuracy(&preds, &golds).unwrap(), accuracy(&rp, &rg).unwrap());
        }
    }
}
