//! Perturbed demonstration sets (mismatched and unrelated NLEs) and the
//! cross-dataset pairings used for the distribution-shift study.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{NleRecord, NleSource, TaskKind};
use crate::prompting::Demonstration;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AblationError {
    #[error("a derangement needs at least two demonstrations, got {0}")]
    TooFewForDerangement(usize),
    #[error("demonstration {0} has no NLE")]
    MissingNle(String),
    #[error("bank has {have} unrelated human NLEs, need {need}")]
    BankExhausted { need: usize, have: usize },
    #[error("cannot pair {demo} ({demo_task}) demonstrations with {target} ({target_task})")]
    TaskMismatch {
        demo: String,
        demo_task: TaskKind,
        target: String,
        target_task: TaskKind,
    },
    #[error("permutation does not match the demonstration list")]
    BadPermutation,
}

/// Record of one perturbation, stored with the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AblationManifest {
    /// Demonstration `i` received the NLE of original demonstration `permutation[i]`.
    Swap { seed: u64, permutation: Vec<usize> },
    /// (demonstration id, id of the instance whose NLE replaced its own).
    RandomHuman {
        seed: u64,
        replacements: Vec<(String, String)>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbed {
    pub demos: Vec<Demonstration>,
    pub manifest: AblationManifest,
}

/// Uniform seeded derangement of `0..n` by rejection sampling.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>, AblationError> {
    if n < 2 {
        return Err(AblationError::TooFewForDerangement(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(&mut rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(p);
        }
    }
}

/// Permutes NLEs among the demonstrations so that none keeps its own.
pub fn swap_nles(demos: &[Demonstration], seed: u64) -> Result<Perturbed, AblationError> {
    if demos.len() < 2 {
        return Err(AblationError::TooFewForDerangement(demos.len()));
    }
    if let Some(d) = demos.iter().find(|d| d.nle.is_none()) {
        return Err(AblationError::MissingNle(d.instance.id.clone()));
    }
    let permutation = derangement(demos.len(), seed)?;
    Ok(Perturbed {
        demos: apply_permutation(demos, &permutation)?,
        manifest: AblationManifest::Swap { seed, permutation },
    })
}

pub fn apply_permutation(demos: &[Demonstration], permutation: &[usize]) -> Result<Vec<Demonstration>, AblationError> {
    let mut sorted = permutation.to_vec();
    sorted.sort_unstable();
    if sorted != (0..demos.len()).collect::<Vec<_>>() {
        return Err(AblationError::BadPermutation);
    }
    Ok(demos
        .iter()
        .zip(permutation)
        .map(|(d, &src)| Demonstration {
            nle: demos[src].nle.clone(),
            ..d.clone()
        })
        .collect())
}

pub fn invert_permutation(permutation: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; permutation.len()];
    for (i, &p) in permutation.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Replaces every demonstration's NLE with a distinct human NLE drawn from
/// bank records bound to none of the demonstration instances.
pub fn randomize_human_nles(
    demos: &[Demonstration],
    human_bank: &[NleRecord],
    seed: u64,
) -> Result<Perturbed, AblationError> {
    let demo_ids: HashSet<&str> = demos.iter().map(|d| d.instance.id.as_str()).collect();
    let mut eligible: Vec<&NleRecord> = human_bank
        .iter()
        .filter(|r| r.source == NleSource::Human && !demo_ids.contains(r.instance_id.as_str()))
        .collect();
    if eligible.len() < demos.len() {
        return Err(AblationError::BankExhausted {
            need: demos.len(),
            have: eligible.len(),
        });
    }
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut replacements = Vec::with_capacity(demos.len());
    let out = demos
        .iter()
        .zip(&eligible)
        .map(|(d, r)| {
            replacements.push((d.instance.id.clone(), r.instance_id.clone()));
            Demonstration {
                nle: Some((*r).clone()),
                ..d.clone()
            }
        })
        .collect();
    Ok(Perturbed {
        demos: out,
        manifest: AblationManifest::RandomHuman { seed, replacements },
    })
}

/// Demonstrations from one dataset, evaluation on another.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftPairing {
    pub demo_dataset: String,
    pub eval_dataset: String,
    pub task: TaskKind,
}

pub fn shift_pairing(
    demo_source: (&str, TaskKind),
    test_target: (&str, TaskKind),
) -> Result<ShiftPairing, AblationError> {
    if demo_source.1 != test_target.1 {
        return Err(AblationError::TaskMismatch {
            demo: demo_source.0.to_string(),
            demo_task: demo_source.1,
            target: test_target.0.to_string(),
            target_task: test_target.1,
        });
    }
    Ok(ShiftPairing {
        demo_dataset: demo_source.0.to_string(),
        eval_dataset: test_target.0.to_string(),
        task: demo_source.1,
    })
}
