//! Regenerates `fixtures/eval_set.json` and `fixtures/ratings.jsonl`.
//!
//! 250 correctly predicted items rated by four annotators with full overlap
//! (1000 ratings): 466 fives, 393 fours, 81 threes, 44 twos, 16 ones.
//!
//!     cargo run -p xicl-annotate --example build_fixture

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xicl_annotate::{
    build_eval_set, Candidate, EvalSetSpec, LabelKind, Overlap, Reason, Sampling, SourcePool, StoredRating,
};
use xicl_core::corpus::{Instance, TaskKind};

const SEED: u64 = 2024;
const SCORE_COUNTS: [(u8, usize); 5] = [(5, 466), (4, 393), (3, 81), (2, 44), (1, 16)];

fn pool(source: &str, offset: usize) -> SourcePool {
    let labels = TaskKind::Nli.labels();
    SourcePool {
        source: source.to_string(),
        candidates: (0..200)
            .map(|i| {
                let n = offset + i;
                let gold = labels[n % labels.len()];
                let correct = n % 4 != 3;
                let label = if correct { gold } else { labels[(n + 1) % labels.len()] };
                Candidate {
                    instance: Instance {
                        id: format!("anli-{n:04}"),
                        task: TaskKind::Nli,
                        text_a: format!("Fixture premise number {n} describes a scene."),
                        text_b: format!("Fixture hypothesis number {n} makes a claim."),
                        gold_label: gold,
                    },
                    label,
                    label_kind: LabelKind::Predicted,
                    nle: format!("Explanation {n} from {source} links the claim to the scene."),
                    correct: Some(correct),
                }
            })
            .collect(),
    }
}

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    let pools = [pool("gpt-3.5-turbo", 0), pool("zephyr-7b", 200)];
    let spec = EvalSetSpec::numbered(Sampling::Inference { n: 250 }, 4, Overlap::Full);
    let set = build_eval_set(&pools, &spec, SEED).unwrap();
    set.save(&dir.join("eval_set.json")).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut scores: Vec<u8> = SCORE_COUNTS
        .iter()
        .flat_map(|&(s, n)| std::iter::repeat_n(s, n))
        .collect();
    scores.shuffle(&mut rng);
    let pairs = set
        .assignments
        .iter()
        .flat_map(|a| a.item_ids.iter().map(move |i| (a.annotator_id.clone(), i.clone())));
    let mut log = String::new();
    for (idx, ((annotator, item), score)) in pairs.zip(scores).enumerate() {
        let mut reasons = BTreeSet::new();
        if score <= 2 {
            for _ in 0..rng.gen_range(1..=2) {
                reasons.insert(*Reason::ALL.choose(&mut rng).unwrap());
            }
        }
        let r = StoredRating {
            version: 1,
            item_id: item,
            annotator_id: annotator,
            score,
            reasons,
            timestamp: 1_700_000_000_000 + idx as u64 * 1000,
        };
        writeln!(log, "{}", serde_json::to_string(&r).unwrap()).unwrap();
    }
    std::fs::write(dir.join("ratings.jsonl"), log).unwrap();
    println!("wrote {}", dir.display());
}
