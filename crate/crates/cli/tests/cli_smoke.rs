use std::fs;
use std::path::Path;

use clap::Parser;
use xicl::{run, Cli};

const RULES: &str = r#"
default_reply = "Label: neutral\nNLE: Nothing in the premise settles it."

[[rules]]
regex = '(?m)^Hypothesis: .*\bnot\b.*\z'
reply = "Label: contradiction\nNLE: The hypothesis denies the premise."
"#;

fn write_suite(dir: &Path) {
    let mut train = String::new();
    let mut test = String::new();
    let mut bank = String::new();
    for i in 0..12 {
        let label = ["entailment", "neutral", "contradiction"][i % 3];
        let hyp = if label == "contradiction" { "The dog is not here." } else { "A dog is here." };
        let row = |split: &str| {
            format!(
                "{}\n",
                serde_json::json!({"id": format!("{split}-{i}"), "text_a": format!("A dog {i} is in the {split} yard."), "text_b": hyp, "label": label})
            )
        };
        train.push_str(&row("train"));
        test.push_str(&row("test"));
        bank.push_str(&format!(
            "{}\n",
            serde_json::json!({"instance_id": format!("train-{i}"), "text": format!("Reason number {i}."), "source": "human", "mode": "none", "generator": "human"})
        ));
    }
    fs::write(dir.join("train.jsonl"), train).unwrap();
    fs::write(dir.join("test.jsonl"), test).unwrap();
    fs::write(dir.join("nles.jsonl"), bank).unwrap();
    fs::write(dir.join("rules.toml"), RULES).unwrap();
    let mut suite = String::from(
        r#"results_dir = "results"
cache = "cache.jsonl"
eval_model = "mock-llm"

[backend]
backend = "mock"
rules = "rules.toml"

[[datasets]]
name = "train"
task = "nli"
path = "train.jsonl"
split = "train"

[[datasets]]
name = "test"
task = "nli"
path = "test.jsonl"

[[banks]]
name = "human"
dataset = "train"
path = "nles.jsonl"
"#,
    );
    for m in ["icl", "xicl_human", "xicl_human_rand", "icl_bm25"] {
        let bank = if m == "icl_bm25" { "" } else { "nle_bank = \"human\"\n" };
        suite.push_str(&format!(
            "\n[[cells]]\nmethod = \"{m}\"\ndemo_dataset = \"train\"\neval_dataset = \"test\"\n{bank}k = 2\nn_runs = 2\n"
        ));
    }
    fs::write(dir.join("suite.toml"), suite).unwrap();
}

fn xicl(args: &[&str]) -> i32 {
    let cli = Cli::try_parse_from(std::iter::once("xicl").chain(args.iter().copied())).unwrap();
    run(cli).unwrap()
}

#[test]
fn ingest_reports_labels_and_banks() {
    let tmp = tempfile::tempdir().unwrap();
    write_suite(tmp.path());
    let data = tmp.path().join("train.jsonl");
    let cli = Cli::try_parse_from([
        "xicl",
        "ingest",
        "--data",
        data.to_str().unwrap(),
        "--task",
        "nli",
        "--bank",
        tmp.path().join("nles.jsonl").to_str().unwrap(),
    ])
    .unwrap();
    let xicl::Command::Ingest(args) = cli.command else { panic!() };
    let report = xicl::ingest(&args).unwrap();
    assert_eq!(report.instances, 12);
    assert_eq!(report.labels.values().sum::<usize>(), 12);
    assert_eq!(report.banks[0].bindings["human/none/human"], 12);
}

#[test]
fn ablate_filters_cells_and_report_rerenders() {
    let tmp = tempfile::tempdir().unwrap();
    write_suite(tmp.path());
    let suite = tmp.path().join("suite.toml");
    let results = tmp.path().join("out");
    let code = xicl(&["ablate", "-c", suite.to_str().unwrap(), "--results-dir", results.to_str().unwrap()]);
    assert_eq!(code, 0);
    let cells = fs::read_dir(results.join("mock-llm")).unwrap().count();
    assert_eq!(cells, 3, "icl_bm25 is not an ablation cell");
    let first = fs::read_to_string(results.join("report.md")).unwrap();
    fs::remove_file(results.join("report.md")).unwrap();
    assert_eq!(xicl(&["report", "--results-dir", results.to_str().unwrap()]), 0);
    assert_eq!(fs::read_to_string(results.join("report.md")).unwrap(), first);
}

#[test]
fn analyze_gen_nles_and_probe() {
    let tmp = tempfile::tempdir().unwrap();
    write_suite(tmp.path());
    let suite = tmp.path().join("suite.toml");
    let s = suite.to_str().unwrap();

    assert_eq!(xicl(&["analyze", "-c", s]), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("analysis/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["groups"][0]["length"]["count"], 12);

    let out = tmp.path().join("gen.jsonl");
    let code = xicl(&[
        "gen-nles", "-c", s, "--dataset", "train", "--mode", "few-shot", "--generator", "mock-llm", "--cap", "5", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 5);
    assert!(tmp.path().join("gen.jsonl.manifest.json").exists());

    let probe = tmp.path().join("probe.json");
    assert_eq!(xicl(&["probe-memorization", "-c", s, "--dataset", "test", "--out", probe.to_str().unwrap()]), 0);
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(probe).unwrap()).unwrap();
    assert_eq!(result["evaluated"], 12);
    assert_eq!(result["extractable"], 0);
}
