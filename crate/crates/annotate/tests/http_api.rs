use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use xicl_annotate::{
    build_eval_set, read_log, router, AppState, AssignmentPayload, Candidate, EvalSet, EvalSetSpec, LabelKind,
    Overlap, RatingStore, Sampling, SourcePool, StoreState, TOKEN_HEADER,
};
use xicl_core::corpus::{Instance, Label, TaskKind};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn small_set() -> EvalSet {
    let pool = |source: &str| SourcePool {
        source: source.into(),
        candidates: (0..6)
            .map(|i| Candidate {
                instance: Instance {
                    id: format!("{source}-{i}"),
                    task: TaskKind::Nli,
                    text_a: "A dog runs on the beach.".into(),
                    text_b: "An animal is outside.".into(),
                    gold_label: Label::Entailment,
                },
                label: Label::Entailment,
                label_kind: LabelKind::Gold,
                nle: format!("A dog is an animal and a beach is outside ({i})."),
                correct: None,
            })
            .collect(),
    };
    let spec = EvalSetSpec::numbered(Sampling::PerSource { n: 5 }, 2, Overlap::Partition);
    build_eval_set(&[pool("human"), pool("gpt-3.5-turbo")], &spec, 3).unwrap()
}

struct Server {
    base: String,
    store: Arc<RatingStore>,
    agent: ureq::Agent,
}

fn start(set: EvalSet, store: RatingStore, token: Option<&str>, static_dir: Option<PathBuf>) -> Server {
    let store = Arc::new(store);
    let app = AppState {
        eval_set: Arc::new(set),
        store: store.clone(),
        token: token.map(str::to_string),
    };
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(app, static_dir)).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    Server {
        base: format!("http://{addr}"),
        store,
        agent,
    }
}

impl Server {
    fn get(&self, path: &str) -> (u16, String) {
        let mut resp = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
    }

    fn post(&self, body: &Value) -> (u16, Value) {
        let mut resp = self
            .agent
            .post(format!("{}/api/rating", self.base))
            .send_json(body)
            .unwrap();
        (resp.status().as_u16(), resp.body_mut().read_json().unwrap())
    }
}

fn keys(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                out.push(k.clone());
                keys(v, out);
            }
        }
        Value::Array(a) => a.iter().for_each(|v| keys(v, out)),
        _ => {}
    }
}

#[test]
fn assignment_payload_is_blind() {
    let set = small_set();
    let srv = start(set.clone(), RatingStore::in_memory(), None, None);
    for a in &set.assignments {
        let (status, body) = srv.get(&format!("/api/assignment/{}", a.annotator_id));
        assert_eq!(status, 200);
        let v: Value = serde_json::from_str(&body).unwrap();
        let mut ks = Vec::new();
        keys(&v, &mut ks);
        assert!(!ks.iter().any(|k| k == "source"), "{ks:?}");
        assert!(!body.contains("gpt-3.5-turbo"), "{body}");
        let payload: AssignmentPayload = serde_json::from_str(&body).unwrap();
        assert_eq!(payload.total, 5);
        assert!(payload.items.iter().all(|i| i.source_hidden));
        let order: Vec<&String> = payload.items.iter().map(|i| &i.item_id).collect();
        assert_eq!(order, a.item_ids.iter().collect::<Vec<_>>());
    }
    assert_eq!(srv.get("/api/assignment/nobody").0, 404);
}

#[test]
fn rating_lifecycle() {
    let set = small_set();
    let a1 = set.assignments[0].clone();
    let a2 = set.assignments[1].clone();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ratings.jsonl");
    let srv = start(set, RatingStore::open(&log).unwrap(), None, None);

    assert_eq!(srv.get("/api/summary").0, 409);
    let item = &a1.item_ids[0];
    let (s, v) = srv.post(&json!({"item_id": item, "annotator_id": a1.annotator_id, "score": 5}));
    assert_eq!((s, v["version"].as_u64()), (200, Some(1)));
    let (s, v) = srv.post(&json!({"item_id": item, "annotator_id": a1.annotator_id, "score": 2, "reasons": ["too_verbose"]}));
    assert_eq!((s, v["version"].as_u64()), (200, Some(2)));
    let (s, v) = srv.post(&json!({"item_id": a1.item_ids[1], "annotator_id": a1.annotator_id, "score": 1, "reasons": []}));
    assert_eq!((s, v["code"].as_str()), (422, Some("invalid_reasons")));
    let (s, v) = srv.post(&json!({"item_id": a1.item_ids[1], "annotator_id": a1.annotator_id, "score": 4, "reasons": ["template"]}));
    assert_eq!((s, v["code"].as_str()), (422, Some("invalid_reasons")));
    let (s, _) = srv.post(&json!({"item_id": a2.item_ids[0], "annotator_id": a1.annotator_id, "score": 4}));
    assert_eq!(s, 403);
    let (s, _) = srv.post(&json!({"item_id": "item-9999", "annotator_id": a1.annotator_id, "score": 4}));
    assert_eq!(s, 404);
    let (s, v) = srv.post(&json!({"item_id": item, "annotator_id": a1.annotator_id, "score": 4, "reasons": ["bogus"]}));
    assert_eq!((s, v["code"].as_str()), (400, Some("bad_request")));

    let (_, body) = srv.get(&format!("/api/assignment/{}", a1.annotator_id));
    let payload: AssignmentPayload = serde_json::from_str(&body).unwrap();
    assert_eq!(payload.completed, 1);
    assert_eq!(payload.items[0].rated, Some(2));

    let (status, body) = srv.get("/api/summary");
    assert_eq!(status, 200);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["n_ratings"], 1);
    assert_eq!(v["overlap"], "partition");
    assert_eq!(v["reasons"][0]["reason"], "too_verbose");
    assert_eq!(*srv.store.snapshot(), StoreState::replay(&read_log(&log).unwrap()));
}

#[test]
fn concurrent_submissions_are_serialized() {
    let spec = EvalSetSpec::numbered(Sampling::PerSource { n: 6 }, 8, Overlap::Full);
    let pool = SourcePool {
        source: "human".into(),
        candidates: small_set().items.iter().map(|i| Candidate {
            instance: i.instance.clone(),
            label: i.label,
            label_kind: i.label_kind,
            nle: i.nle.clone(),
            correct: None,
        }).collect(),
    };
    let set = build_eval_set(&[pool], &spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ratings.jsonl");
    let srv = Arc::new(start(set.clone(), RatingStore::open(&log).unwrap(), None, None));
    let handles: Vec<_> = set
        .assignments
        .iter()
        .cloned()
        .map(|a| {
            let srv = srv.clone();
            std::thread::spawn(move || {
                for (i, item) in a.item_ids.iter().enumerate() {
                    let score = 3 + (i % 3) as u64;
                    let (s, _) = srv.post(&json!({"item_id": item, "annotator_id": a.annotator_id, "score": score}));
                    assert_eq!(s, 200);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let entries = read_log(&log).unwrap();
    assert_eq!(entries.len(), 48);
    assert_eq!(*srv.store.snapshot(), StoreState::replay(&entries));
}

#[test]
fn token_is_enforced_when_configured() {
    let set = small_set();
    let annotator = set.assignments[0].annotator_id.clone();
    let srv = start(set, RatingStore::in_memory(), Some("s3cret"), None);
    assert_eq!(srv.get(&format!("/api/assignment/{annotator}")).0, 401);
    let resp = srv
        .agent
        .get(format!("{}/api/assignment/{annotator}", srv.base))
        .header(TOKEN_HEADER, "s3cret")
        .call()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let resp = srv
        .agent
        .get(format!("{}/api/assignment/{annotator}", srv.base))
        .header("authorization", "Bearer s3cret")
        .call()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
}

#[test]
fn serves_static_bundle() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>rate</h1>").unwrap();
    let srv = start(small_set(), RatingStore::in_memory(), None, Some(dir.path().to_path_buf()));
    let (status, body) = srv.get("/index.html");
    assert_eq!((status, body.as_str()), (200, "<h1>rate</h1>"));
}

#[test]
fn shipped_fixture_summary() {
    let set = EvalSet::load(&fixtures().join("eval_set.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ratings.jsonl");
    std::fs::copy(fixtures().join("ratings.jsonl"), &log).unwrap();
    let srv = start(set, RatingStore::open(&log).unwrap(), None, None);
    let (status, body) = srv.get("/api/summary");
    assert_eq!(status, 200);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["n_ratings"], 1000);
    assert_eq!(v["overlap"], "full");
    let pct = |i: usize| v["overall"]["percent"][i].as_f64().unwrap();
    assert!((pct(4) - 46.6).abs() < 1e-9);
    assert!((pct(3) - 39.3).abs() < 1e-9);
    assert!((v["overall"]["satisfied_or_better"].as_f64().unwrap() - 85.9).abs() < 1e-9);
    assert_eq!(v["annotator_means"].as_array().unwrap().len(), 8);
}
