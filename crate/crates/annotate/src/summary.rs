use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::eval_set::{EvalSet, Overlap};
use crate::store::{Reason, StoreState, StoredRating, DISSATISFIED_MAX};
use crate::AnnotateError;

/// Percentages are in 0..=100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub n: usize,
    /// Index 0 holds score 1.
    pub counts: [usize; 5],
    pub percent: [f64; 5],
    pub mean: f64,
    /// Share of scores 4 and 5.
    pub satisfied_or_better: f64,
}

impl ScoreDistribution {
    fn of<'a>(ratings: impl Iterator<Item = &'a StoredRating>) -> Self {
        let mut counts = [0usize; 5];
        for r in ratings {
            counts[usize::from(r.score) - 1] += 1;
        }
        let n: usize = counts.iter().sum();
        let pct = |c: usize| if n == 0 { 0.0 } else { c as f64 * 100.0 / n as f64 };
        let total: usize = counts.iter().enumerate().map(|(i, c)| (i + 1) * c).sum();
        ScoreDistribution {
            n,
            counts,
            percent: counts.map(pct),
            mean: if n == 0 { 0.0 } else { total as f64 / n as f64 },
            satisfied_or_better: pct(counts[3] + counts[4]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorMean {
    pub annotator_id: String,
    pub source: String,
    pub n: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonShare {
    pub reason: Reason,
    pub count: usize,
    /// Share of all reason mentions on dissatisfied ratings.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSummary {
    pub overlap: Overlap,
    pub n_ratings: usize,
    pub overall: ScoreDistribution,
    pub by_source: BTreeMap<String, ScoreDistribution>,
    pub annotator_means: Vec<AnnotatorMean>,
    pub n_dissatisfied: usize,
    pub reasons: Vec<ReasonShare>,
}

/// Folds the latest rating of every (item, annotator) pair; this is the only
/// place NLE sources are revealed.
pub fn summarize_ratings(set: &EvalSet, state: &StoreState) -> Result<RatingSummary, AnnotateError> {
    if state.latest.is_empty() {
        return Err(AnnotateError::EmptyStore);
    }
    let source_of: BTreeMap<&str, &str> = set
        .items
        .iter()
        .map(|i| (i.item_id.as_str(), i.source.as_str()))
        .collect();
    let ratings: Vec<(&str, &StoredRating)> = state
        .ratings()
        .map(|r| {
            source_of
                .get(r.item_id.as_str())
                .map(|s| (*s, r))
                .ok_or_else(|| AnnotateError::UnknownItem(r.item_id.clone()))
        })
        .collect::<Result<_, _>>()?;

    let mut per_source: BTreeMap<&str, Vec<&StoredRating>> = BTreeMap::new();
    let mut per_annotator: BTreeMap<(&str, &str), Vec<u8>> = BTreeMap::new();
    for (source, r) in &ratings {
        per_source.entry(source).or_default().push(r);
        per_annotator
            .entry((r.annotator_id.as_str(), source))
            .or_default()
            .push(r.score);
    }

    let dissatisfied: Vec<&StoredRating> = ratings
        .iter()
        .map(|(_, r)| *r)
        .filter(|r| r.score <= DISSATISFIED_MAX)
        .collect();
    let mut reason_counts: BTreeMap<Reason, usize> = BTreeMap::new();
    for r in &dissatisfied {
        for reason in &r.reasons {
            *reason_counts.entry(*reason).or_default() += 1;
        }
    }
    let mentions: usize = reason_counts.values().sum();

    Ok(RatingSummary {
        overlap: set.spec.overlap,
        n_ratings: ratings.len(),
        overall: ScoreDistribution::of(ratings.iter().map(|(_, r)| *r)),
        by_source: per_source
            .into_iter()
            .map(|(s, rs)| (s.to_string(), ScoreDistribution::of(rs.into_iter())))
            .collect(),
        annotator_means: per_annotator
            .into_iter()
            .map(|((a, s), scores)| AnnotatorMean {
                annotator_id: a.to_string(),
                source: s.to_string(),
                n: scores.len(),
                mean: scores.iter().map(|&x| f64::from(x)).sum::<f64>() / scores.len() as f64,
            })
            .collect(),
        n_dissatisfied: dissatisfied.len(),
        reasons: reason_counts
            .into_iter()
            .map(|(reason, count)| ReasonShare {
                reason,
                count,
                percent: count as f64 * 100.0 / mentions as f64,
            })
            .collect(),
    })
}
