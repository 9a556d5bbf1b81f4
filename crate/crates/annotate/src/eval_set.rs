use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xicl_core::corpus::{Instance, Label};

use crate::AnnotateError;

/// Whether the shown label is the gold label or the model's prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Gold,
    Predicted,
}

/// A rateable NLE from one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub instance: Instance,
    pub label: Label,
    pub label_kind: LabelKind,
    pub nle: String,
    /// For predictions: whether the predicted label was correct.
    pub correct: Option<bool>,
}

/// Candidates produced by one NLE source ("human", "gpt-3.5-turbo", ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePool {
    pub source: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum Sampling {
    /// `n` items drawn from every source.
    PerSource { n: usize },
    /// `n` instances; each contributes one of its NLE variants, drawn uniformly.
    Variants { n: usize },
    /// `n` items drawn from correctly predicted candidates across all sources.
    Inference { n: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    /// Items split evenly; every item rated once.
    #[default]
    Partition,
    /// Every annotator rates every item.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetSpec {
    pub sampling: Sampling,
    pub annotators: Vec<String>,
    #[serde(default)]
    pub overlap: Overlap,
}

impl EvalSetSpec {
    /// Annotators named `a1..an`.
    pub fn numbered(sampling: Sampling, n_annotators: usize, overlap: Overlap) -> Self {
        EvalSetSpec {
            sampling,
            annotators: (1..=n_annotators).map(|i| format!("a{i}")).collect(),
            overlap,
        }
    }
}

/// Server-side item; `source` never leaves the server before summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub instance: Instance,
    pub label: Label,
    pub label_kind: LabelKind,
    pub nle: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAssignment {
    pub annotator_id: String,
    /// In presentation order.
    pub item_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub seed: u64,
    pub spec: EvalSetSpec,
    pub items: Vec<EvalItem>,
    pub assignments: Vec<EvalAssignment>,
}

impl EvalSet {
    pub fn item(&self, id: &str) -> Option<&EvalItem> {
        self.items.iter().find(|i| i.item_id == id)
    }

    pub fn assignment(&self, annotator: &str) -> Option<&EvalAssignment> {
        self.assignments.iter().find(|a| a.annotator_id == annotator)
    }

    pub fn is_assigned(&self, annotator: &str, item_id: &str) -> bool {
        self.assignment(annotator)
            .is_some_and(|a| a.item_ids.iter().any(|i| i == item_id))
    }

    pub fn load(path: &Path) -> Result<Self, AnnotateError> {
        let raw = std::fs::read_to_string(path).map_err(|e| AnnotateError::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| AnnotateError::io(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), AnnotateError> {
        let mut s = serde_json::to_string_pretty(self).expect("eval set serializes");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| AnnotateError::io(path, e))
    }
}

/// Split sizes for `n` items over `k` annotators: the first `n % k` get one extra.
pub fn even_split(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn draw<T: Clone>(pool: &[T], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<T>, AnnotateError> {
    if pool.len() < n {
        return Err(AnnotateError::InsufficientItems {
            need: n,
            have: pool.len(),
        });
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    Ok(idx[..n].iter().map(|&i| pool[i].clone()).collect())
}

/// Samples the items to rate and hands them out to annotators.
pub fn build_eval_set(pools: &[SourcePool], spec: &EvalSetSpec, seed: u64) -> Result<EvalSet, AnnotateError> {
    if spec.annotators.is_empty() {
        return Err(AnnotateError::InvalidSpec("no annotators".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(String, Candidate)> = Vec::new();
    match spec.sampling {
        Sampling::PerSource { n } => {
            for pool in pools {
                for c in draw(&pool.candidates, n, &mut rng)? {
                    picked.push((pool.source.clone(), c));
                }
            }
        }
        Sampling::Variants { n } => {
            let mut variants: BTreeMap<&str, Vec<(&str, &Candidate)>> = BTreeMap::new();
            for pool in pools {
                for c in &pool.candidates {
                    variants
                        .entry(c.instance.id.as_str())
                        .or_default()
                        .push((pool.source.as_str(), c));
                }
            }
            let ids: Vec<&str> = variants.keys().copied().collect();
            for id in draw(&ids, n, &mut rng)? {
                let options = &variants[id];
                let (source, c) = options[rng.gen_range(0..options.len())];
                picked.push((source.to_string(), c.clone()));
            }
        }
        Sampling::Inference { n } => {
            let eligible: Vec<(String, Candidate)> = pools
                .iter()
                .flat_map(|p| {
                    p.candidates
                        .iter()
                        .filter(|c| c.correct == Some(true))
                        .map(|c| (p.source.clone(), c.clone()))
                })
                .collect();
            picked = draw(&eligible, n, &mut rng)?;
        }
    }
    picked.shuffle(&mut rng);
    let width = picked.len().to_string().len().max(4);
    let items: Vec<EvalItem> = picked
        .into_iter()
        .enumerate()
        .map(|(i, (source, c))| EvalItem {
            item_id: format!("item-{:0width$}", i + 1),
            instance: c.instance,
            label: c.label,
            label_kind: c.label_kind,
            nle: c.nle,
            source,
        })
        .collect();
    let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    let assignments = match spec.overlap {
        Overlap::Partition => {
            let mut start = 0;
            spec.annotators
                .iter()
                .zip(even_split(ids.len(), spec.annotators.len()))
                .map(|(a, size)| {
                    let chunk = ids[start..start + size].to_vec();
                    start += size;
                    EvalAssignment {
                        annotator_id: a.clone(),
                        item_ids: chunk,
                    }
                })
                .collect()
        }
        Overlap::Full => spec
            .annotators
            .iter()
            .map(|a| {
                let mut order = ids.clone();
                order.shuffle(&mut rng);
                EvalAssignment {
                    annotator_id: a.clone(),
                    item_ids: order,
                }
            })
            .collect(),
    };
    Ok(EvalSet {
        seed,
        spec: spec.clone(),
        items,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use xicl_core::corpus::TaskKind;

    pub(crate) fn pool(source: &str, n: usize, correct_every: usize) -> SourcePool {
        SourcePool {
            source: source.into(),
            candidates: (0..n)
                .map(|i| Candidate {
                    instance: Instance {
                        id: format!("x{i}"),
                        task: TaskKind::Nli,
                        text_a: format!("premise {i}"),
                        text_b: format!("hypothesis {i}"),
                        gold_label: Label::Entailment,
                    },
                    label: Label::Entailment,
                    label_kind: LabelKind::Predicted,
                    nle: format!("{source} explanation {i}"),
                    correct: Some(i % correct_every == 0),
                })
                .collect(),
        }
    }

    fn sizes(set: &EvalSet) -> Vec<usize> {
        set.assignments.iter().map(|a| a.item_ids.len()).collect()
    }

    #[test]
    fn per_source_two_hundred_over_four() {
        let pools = [pool("gpt-3.5-turbo", 150, 1), pool("human", 150, 1)];
        let spec = EvalSetSpec::numbered(Sampling::PerSource { n: 100 }, 4, Overlap::Partition);
        let set = build_eval_set(&pools, &spec, 1).unwrap();
        assert_eq!(set.items.len(), 200);
        assert_eq!(sizes(&set), [50; 4]);
        assert_eq!(set.items.iter().filter(|i| i.source == "human").count(), 100);
    }

    #[test]
    fn inference_protocol_uses_correct_items_only() {
        let pools = [pool("gpt-3.5-turbo", 700, 2)];
        let spec = EvalSetSpec::numbered(Sampling::Inference { n: 280 }, 7, Overlap::Partition);
        let set = build_eval_set(&pools, &spec, 9).unwrap();
        assert_eq!(sizes(&set), [40; 7]);
        for item in &set.items {
            let n: usize = item.instance.id[1..].parse().unwrap();
            assert_eq!(n % 2, 0);
        }
        let bad = EvalSetSpec::numbered(Sampling::Inference { n: 351 }, 7, Overlap::Partition);
        assert_eq!(
            build_eval_set(&pools, &bad, 9),
            Err(AnnotateError::InsufficientItems { need: 351, have: 350 })
        );
    }

    #[test]
    fn remainder_goes_to_first_annotators() {
        assert_eq!(even_split(10, 3), [4, 3, 3]);
        let spec = EvalSetSpec::numbered(Sampling::Variants { n: 10 }, 3, Overlap::Partition);
        let set = build_eval_set(&[pool("human", 12, 1), pool("gpt", 12, 1)], &spec, 0).unwrap();
        assert_eq!(sizes(&set), [4, 3, 3]);
        let ids: HashSet<&str> = set.items.iter().map(|i| i.instance.id.as_str()).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn full_overlap_gives_everyone_everything() {
        let spec = EvalSetSpec::numbered(Sampling::PerSource { n: 5 }, 3, Overlap::Full);
        let set = build_eval_set(&[pool("human", 5, 1)], &spec, 4).unwrap();
        for a in &set.assignments {
            let mut ids = a.item_ids.clone();
            ids.sort();
            assert_eq!(ids.len(), 5);
            assert_eq!(ids, set.items.iter().map(|i| i.item_id.clone()).collect::<Vec<_>>());
        }
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_deterministic(n in 1usize..60, k in 1usize..8, seed in any::<u64>()) {
            let spec = EvalSetSpec::numbered(Sampling::PerSource { n }, k, Overlap::Partition);
            let pools = [pool("human", 60, 1)];
            let set = build_eval_set(&pools, &spec, seed).unwrap();
            let mut all: Vec<&String> = set.assignments.iter().flat_map(|a| &a.item_ids).collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            let s = sizes(&set);
            prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
            prop_assert_eq!(set, build_eval_set(&pools, &spec, seed).unwrap());
        }
    }
}
