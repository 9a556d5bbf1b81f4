//! Regenerates `fixtures/replay/`: a suite whose recorded responses reproduce
//! the published Zephyr and GPT-3.5 accuracies for ICL and fs-X-ICL.
//!
//! Every eval set has 250 instances, so one run's accuracy moves in steps of
//! 0.4 points. Per-run correct counts are chosen so their mean is the
//! published mean exactly and their sample std is as close as the grid allows
//! to the published std.
//!
//!     cargo run -p xicl --example build_replay_fixture

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xicl_core::corpus::{self, Dataset, Instance, Label, NleMode, NleRecord, NleSource, Split, TaskKind};
use xicl_core::llm::mock::MockBackend;
use xicl_core::llm::{CacheEntry, CacheKey, FinishReason, LlmClient, ResponseCache, Usage};
use xicl_core::metrics::sample_std;
use xicl_core::runner::{derive_seed, plan_cell, SuiteConfig, SuiteContext};

const N_EVAL: usize = 250;
const N_DEMO: usize = 32;
const ENDPOINT: &str = "fixture-endpoint";
const SEED: u64 = 2024;

const EVAL_SETS: [&str; 10] = [
    "snli", "hans", "iscs", "nan", "st", "picd", "pisp", "anli_r1", "anli_r2", "anli_r3",
];

/// (model, method, dataset, mean %, std %)
const TARGETS: &[(&str, &str, &str, f64, f64)] = &[
    ("zephyr-7b", "icl", "snli", 67.1, 3.4),
    ("zephyr-7b", "icl", "hans", 71.0, 1.8),
    ("zephyr-7b", "icl", "iscs", 63.4, 1.2),
    ("zephyr-7b", "icl", "nan", 65.7, 1.8),
    ("zephyr-7b", "icl", "st", 60.5, 1.0),
    ("zephyr-7b", "icl", "picd", 64.8, 1.5),
    ("zephyr-7b", "icl", "pisp", 48.4, 1.4),
    ("zephyr-7b", "icl", "anli_r1", 47.1, 1.6),
    ("zephyr-7b", "icl", "anli_r2", 47.1, 1.6),
    ("zephyr-7b", "icl", "anli_r3", 47.1, 1.6),
    ("zephyr-7b", "xicl_fs", "snli", 74.2, 3.6),
    ("zephyr-7b", "xicl_fs", "hans", 77.4, 2.2),
    ("zephyr-7b", "xicl_fs", "iscs", 67.0, 1.6),
    ("zephyr-7b", "xicl_fs", "nan", 67.7, 2.3),
    ("zephyr-7b", "xicl_fs", "st", 69.3, 1.5),
    ("zephyr-7b", "xicl_fs", "picd", 70.0, 2.1),
    ("zephyr-7b", "xicl_fs", "pisp", 65.6, 2.5),
    ("zephyr-7b", "xicl_fs", "anli_r1", 52.1, 2.8),
    ("zephyr-7b", "xicl_fs", "anli_r2", 52.1, 2.8),
    ("zephyr-7b", "xicl_fs", "anli_r3", 52.1, 2.8),
    ("gpt-3.5-turbo-0613", "icl", "snli", 71.9, 1.4),
    ("gpt-3.5-turbo-0613", "xicl_fs", "snli", 75.5, 2.8),
];

fn instance(dataset: &str, i: usize) -> Instance {
    let labels = TaskKind::Nli.labels();
    Instance {
        id: format!("{dataset}-{i:04}"),
        task: TaskKind::Nli,
        text_a: format!("In {dataset} scene {i} a person number {} waits near object {}.", i % 17, i % 23),
        text_b: format!("The {dataset} claim {i} concerns person {} and object {}.", i % 13, i % 19),
        gold_label: labels[i % labels.len()],
    }
}

fn dataset(name: &str, n: usize, split: Split) -> Dataset {
    Dataset {
        name: name.to_string(),
        split,
        task: TaskKind::Nli,
        instances: (0..n).map(|i| instance(name, i)).collect(),
    }
}

/// Per-run correct counts out of `N_EVAL` with mean `mean_pct` and sample std near `std_pct`.
fn run_counts(mean_pct: f64, std_pct: f64, n_runs: usize) -> Vec<i64> {
    let total = (mean_pct * N_EVAL as f64 * n_runs as f64 / 100.0).round() as i64;
    assert_eq!(n_runs, 4);
    let base = total / 4;
    let pct = |c: &[i64]| c.iter().map(|&x| x as f64 * 100.0 / N_EVAL as f64).collect::<Vec<_>>();
    let mut best: Option<(f64, Vec<i64>)> = None;
    for a in -30..=30 {
        for b in a..=30 {
            for c in b..=30 {
                let d = total - 4 * base - a - b - c;
                if d < c {
                    continue;
                }
                let counts = vec![base + a, base + b, base + c, base + d];
                if counts.iter().any(|&x| x < 0 || x > N_EVAL as i64) {
                    continue;
                }
                let err = (sample_std(&pct(&counts)) - std_pct).abs();
                if best.as_ref().is_none_or(|(e, _)| err < *e - 1e-12) {
                    best = Some((err, counts));
                }
            }
        }
    }
    let counts = best.expect("some split exists").1;
    // Spread the high and low runs instead of sorting them.
    vec![counts[2], counts[0], counts[3], counts[1]]
}

fn suite_toml() -> String {
    let mut s = format!(
        r#"# Recorded responses that replay the published Zephyr and GPT-3.5 accuracies.
results_dir = "results"
cache = "cache.jsonl"
eval_model = "zephyr-7b"
seed = {SEED}

[backend]
backend = "replay"
endpoint = "{ENDPOINT}"

[[datasets]]
name = "esnli_train"
task = "nli"
path = "data/esnli_train.jsonl"
split = "train"

[[banks]]
name = "esnli_fs"
dataset = "esnli_train"
path = "data/esnli_train.fs_nles.jsonl"
"#
    );
    for d in EVAL_SETS {
        write!(s, "\n[[datasets]]\nname = \"{d}\"\ntask = \"nli\"\npath = \"data/{d}.jsonl\"\n").unwrap();
    }
    for (model, method, dataset, _, _) in TARGETS {
        write!(
            s,
            "\n[[cells]]\nmethod = \"{method}\"\neval_model = \"{model}\"\ndemo_dataset = \"esnli_train\"\neval_dataset = \"{dataset}\"\nnle_bank = \"esnli_fs\"\n"
        )
        .unwrap();
        if *method == "xicl_fs" {
            s.push_str("nle_generator_model = \"gpt-3.5-turbo\"\n");
        }
    }
    s
}

fn reply(label: Label, with_nle: bool, id: &str) -> String {
    if with_nle {
        format!("Label: {}\nNLE: The claim in {id} follows from how the scene is described.", label.prompt_form())
    } else {
        format!("Label: {}", label.prompt_form())
    }
}

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/replay");
    let _ = std::fs::remove_dir_all(&dir);
    let data = dir.join("data");

    let demo = dataset("esnli_train", N_DEMO, Split::Train);
    corpus::write_file(&data.join("esnli_train.jsonl"), &corpus::serialize_dataset(&demo)).unwrap();
    let bank: Vec<NleRecord> = demo
        .instances
        .iter()
        .map(|i| NleRecord {
            instance_id: i.id.clone(),
            text: format!("Because {} the label is {}.", i.text_a.to_lowercase().trim_end_matches('.'), i.gold_label.prompt_form()),
            source: NleSource::Model,
            mode: NleMode::FewShot,
            generator: "gpt-3.5-turbo".to_string(),
        })
        .collect();
    corpus::write_file(&data.join("esnli_train.fs_nles.jsonl"), &corpus::serialize_nle_bank(&bank)).unwrap();
    for d in EVAL_SETS {
        let ds = dataset(d, N_EVAL, Split::Test);
        corpus::write_file(&data.join(format!("{d}.jsonl")), &corpus::serialize_dataset(&ds)).unwrap();
    }
    let suite_path = dir.join("suite.toml");
    corpus::write_file(&suite_path, &suite_toml()).unwrap();

    let suite = SuiteConfig::load(&suite_path).unwrap();
    let planner = Arc::new(LlmClient::builder(Box::new(MockBackend::echo())).build());
    let ctx = SuiteContext::load(&suite, planner).unwrap();
    let cache = ResponseCache::open(&dir.join("cache.jsonl")).unwrap();
    let mut written: BTreeMap<CacheKey, String> = BTreeMap::new();

    for (cfg, (model, method, dataset, mean, std)) in suite.cell_configs().unwrap().iter().zip(TARGETS) {
        assert_eq!((cfg.eval_model.as_str(), cfg.method.as_str(), cfg.eval_dataset.as_str()), (*model, *method, *dataset));
        let plan = plan_cell(&ctx, cfg).unwrap();
        let counts = run_counts(*mean, *std, cfg.n_runs);
        for (run, c) in plan.runs.iter().zip(&counts) {
            let mut order: Vec<usize> = (0..run.queries.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SEED, &cfg.id(), run.run));
            order.shuffle(&mut rng);
            let mut correct = vec![false; order.len()];
            for &i in &order[..*c as usize] {
                correct[i] = true;
            }
            for ((q, req), ok) in run.queries.iter().zip(&run.requests).zip(&correct) {
                let labels = q.task.labels();
                let gold = labels.iter().position(|l| *l == q.gold_label).unwrap();
                let label = if *ok { q.gold_label } else { labels[(gold + 1) % labels.len()] };
                let text = reply(label, *method == "xicl_fs", &q.id);
                let key = CacheKey::for_chat(ENDPOINT, req);
                if let Some(prev) = written.insert(key, text.clone()) {
                    assert_eq!(prev, text, "two prompts of {} share a key", cfg.id());
                }
                cache
                    .put(
                        key,
                        CacheEntry::Chat {
                            text,
                            finish_reason: FinishReason::Stop,
                            usage: Usage::default(),
                        },
                    )
                    .unwrap();
            }
        }
        let pct: Vec<f64> = counts.iter().map(|&c| c as f64 * 100.0 / N_EVAL as f64).collect();
        println!("{:<40} {pct:?} std {:.3}", cfg.id(), sample_std(&pct));
    }
    println!("wrote {} responses to {}", written.len(), dir.display());
}
