use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::eval_set::EvalSet;
use crate::AnnotateError;

/// Why an annotator was dissatisfied with an NLE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    /// The NLE simply restates the input.
    Template,
    InsufficientJustification,
    TooVerbose,
    IncorrectArguments,
    ContradictCommonsense,
    Hallucinations,
}

impl Reason {
    pub const ALL: [Reason; 6] = [
        Reason::Template,
        Reason::InsufficientJustification,
        Reason::TooVerbose,
        Reason::IncorrectArguments,
        Reason::ContradictCommonsense,
        Reason::Hallucinations,
    ];
}

/// Highest score that counts as dissatisfied (and therefore needs reasons).
pub const DISSATISFIED_MAX: u8 = 2;

/// A submission, as posted by the UI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub item_id: String,
    pub annotator_id: String,
    pub score: u8,
    #[serde(default)]
    pub reasons: BTreeSet<Reason>,
    /// Unix milliseconds; filled in by the server when absent.
    #[serde(default)]
    pub timestamp: Option<u64>,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        if !(1..=5).contains(&self.score) {
            return Err(AnnotateError::InvalidScore(self.score));
        }
        let dissatisfied = self.score <= DISSATISFIED_MAX;
        if dissatisfied == self.reasons.is_empty() {
            return Err(AnnotateError::InvalidReasons {
                score: self.score,
                reasons: self.reasons.len(),
            });
        }
        Ok(())
    }
}

/// One line of the rating log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRating {
    /// 1 for the first submission of an (item, annotator) pair, then 2, 3, ...
    pub version: u32,
    pub item_id: String,
    pub annotator_id: String,
    pub score: u8,
    pub reasons: BTreeSet<Reason>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredId {
    pub version: u32,
}

/// Latest rating per (item, annotator) plus the number of log lines folded in.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoreState {
    pub log_len: usize,
    pub latest: BTreeMap<(String, String), StoredRating>,
}

impl StoreState {
    pub fn apply(&mut self, r: StoredRating) {
        self.log_len += 1;
        self.latest.insert((r.item_id.clone(), r.annotator_id.clone()), r);
    }

    pub fn ratings(&self) -> impl Iterator<Item = &StoredRating> {
        self.latest.values()
    }

    /// Folds a whole log.
    pub fn replay(log: &[StoredRating]) -> Self {
        let mut s = StoreState::default();
        for r in log {
            s.apply(r.clone());
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    log_len: usize,
    latest: Vec<StoredRating>,
}

/// Append-only rating log. Writes go through one appender; readers take
/// `Arc` snapshots of the folded state.
pub struct RatingStore {
    log_path: Option<PathBuf>,
    appender: Mutex<Option<File>>,
    state: RwLock<Arc<StoreState>>,
}

pub fn read_log(path: &Path) -> Result<Vec<StoredRating>, AnnotateError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let raw = fs::read_to_string(path).map_err(|e| AnnotateError::io(path, e))?;
    let mut out = Vec::new();
    let lines: Vec<&str> = raw.split('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            // A torn final line from a crash mid-append.
            Err(_) if i + 1 == lines.len() => tracing::warn!("skipping incomplete final log line"),
            Err(e) => return Err(AnnotateError::io(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

fn snapshot_path(log: &Path) -> PathBuf {
    let mut p = log.as_os_str().to_owned();
    p.push(".snapshot");
    PathBuf::from(p)
}

impl RatingStore {
    pub fn in_memory() -> Self {
        RatingStore {
            log_path: None,
            appender: Mutex::new(None),
            state: RwLock::new(Arc::new(StoreState::default())),
        }
    }

    /// Opens (or creates) a log, starting from its snapshot when one exists.
    pub fn open(log_path: &Path) -> Result<Self, AnnotateError> {
        let log = read_log(log_path)?;
        let mut state = StoreState::default();
        let snap = snapshot_path(log_path);
        if snap.exists() {
            let raw = fs::read_to_string(&snap).map_err(|e| AnnotateError::io(&snap, e))?;
            let s: Snapshot = serde_json::from_str(&raw).map_err(|e| AnnotateError::io(&snap, e))?;
            if s.log_len <= log.len() {
                state.log_len = s.log_len;
                for r in s.latest {
                    state.latest.insert((r.item_id.clone(), r.annotator_id.clone()), r);
                }
            }
        }
        for r in &log[state.log_len..] {
            state.apply(r.clone());
        }
        if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| AnnotateError::io(dir, e))?;
        }
        if let Ok(raw) = fs::read(log_path) {
            // Drop a torn tail so the next append starts on a fresh line.
            if !raw.is_empty() && raw.last() != Some(&b'\n') {
                let keep = raw.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                OpenOptions::new()
                    .write(true)
                    .open(log_path)
                    .and_then(|f| f.set_len(keep as u64))
                    .map_err(|e| AnnotateError::io(log_path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| AnnotateError::io(log_path, e))?;
        Ok(RatingStore {
            log_path: Some(log_path.to_path_buf()),
            appender: Mutex::new(Some(file)),
            state: RwLock::new(Arc::new(state)),
        })
    }

    pub fn snapshot(&self) -> Arc<StoreState> {
        self.state.read().expect("state lock").clone()
    }

    /// Validates against the eval set and appends. Re-submissions get the next version.
    pub fn record(&self, set: &EvalSet, r: RatingRecord) -> Result<StoredId, AnnotateError> {
        if set.item(&r.item_id).is_none() {
            return Err(AnnotateError::UnknownItem(r.item_id));
        }
        if !set.is_assigned(&r.annotator_id, &r.item_id) {
            return Err(AnnotateError::NotAssigned {
                item: r.item_id,
                annotator: r.annotator_id,
            });
        }
        r.validate()?;
        let mut appender = self.appender.lock().expect("appender lock");
        let current = self.snapshot();
        let version = current
            .latest
            .get(&(r.item_id.clone(), r.annotator_id.clone()))
            .map_or(1, |prev| prev.version + 1);
        let stored = StoredRating {
            version,
            item_id: r.item_id,
            annotator_id: r.annotator_id,
            score: r.score,
            reasons: r.reasons,
            timestamp: r.timestamp.unwrap_or_else(now_ms),
        };
        if let (Some(file), Some(path)) = (appender.as_mut(), &self.log_path) {
            let mut line = serde_json::to_string(&stored).expect("rating serializes");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.sync_data())
                .map_err(|e| AnnotateError::io(path, e))?;
        }
        let mut next = (*current).clone();
        next.apply(stored);
        *self.state.write().expect("state lock") = Arc::new(next);
        Ok(StoredId { version })
    }

    /// Writes `<log>.snapshot` with the folded state.
    pub fn write_snapshot(&self) -> Result<(), AnnotateError> {
        let Some(log) = &self.log_path else {
            return Ok(());
        };
        let _guard = self.appender.lock().expect("appender lock");
        let state = self.snapshot();
        let snap = Snapshot {
            log_len: state.log_len,
            latest: state.latest.values().cloned().collect(),
        };
        let path = snapshot_path(log);
        let tmp = path.with_extension("snapshot.tmp");
        fs::write(&tmp, serde_json::to_vec(&snap).expect("snapshot serializes"))
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| AnnotateError::io(&path, e))
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_set::{build_eval_set, Candidate, EvalSetSpec, LabelKind, Overlap, Sampling, SourcePool};
    use xicl_core::corpus::{Instance, Label, TaskKind};

    fn set() -> EvalSet {
        let pool = SourcePool {
            source: "human".into(),
            candidates: (0..4)
                .map(|i| Candidate {
                    instance: Instance {
                        id: format!("x{i}"),
                        task: TaskKind::Nli,
                        text_a: "p".into(),
                        text_b: "h".into(),
                        gold_label: Label::Neutral,
                    },
                    label: Label::Neutral,
                    label_kind: LabelKind::Gold,
                    nle: "because".into(),
                    correct: None,
                })
                .collect(),
        };
        build_eval_set(
            &[pool],
            &EvalSetSpec::numbered(Sampling::PerSource { n: 4 }, 2, Overlap::Partition),
            0,
        )
        .unwrap()
    }

    fn rating(set: &EvalSet, annotator: usize, score: u8, reasons: &[Reason]) -> RatingRecord {
        let a = &set.assignments[annotator];
        RatingRecord {
            item_id: a.item_ids[0].clone(),
            annotator_id: a.annotator_id.clone(),
            score,
            reasons: reasons.iter().copied().collect(),
            timestamp: Some(1),
        }
    }

    #[test]
    fn reason_gating() {
        let s = set();
        let store = RatingStore::in_memory();
        assert!(store.record(&s, rating(&s, 0, 5, &[])).is_ok());
        assert!(store.record(&s, rating(&s, 1, 2, &[Reason::TooVerbose])).is_ok());
        assert_eq!(
            store.record(&s, rating(&s, 0, 1, &[])),
            Err(AnnotateError::InvalidReasons { score: 1, reasons: 0 })
        );
        assert_eq!(
            store.record(&s, rating(&s, 0, 3, &[Reason::Template])),
            Err(AnnotateError::InvalidReasons { score: 3, reasons: 1 })
        );
        assert_eq!(store.record(&s, rating(&s, 0, 6, &[])), Err(AnnotateError::InvalidScore(6)));
    }

    #[test]
    fn assignment_checks() {
        let s = set();
        let store = RatingStore::in_memory();
        let mut r = rating(&s, 0, 4, &[]);
        r.annotator_id = s.assignments[1].annotator_id.clone();
        assert!(matches!(store.record(&s, r), Err(AnnotateError::NotAssigned { .. })));
        let mut r = rating(&s, 0, 4, &[]);
        r.item_id = "nope".into();
        assert_eq!(store.record(&s, r), Err(AnnotateError::UnknownItem("nope".into())));
    }

    #[test]
    fn resubmission_versions_and_log_replays() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("ratings.jsonl");
        let s = set();
        let store = RatingStore::open(&log).unwrap();
        assert_eq!(store.record(&s, rating(&s, 0, 4, &[])).unwrap().version, 1);
        store.write_snapshot().unwrap();
        assert_eq!(store.record(&s, rating(&s, 0, 2, &[Reason::Hallucinations])).unwrap().version, 2);
        assert_eq!(store.record(&s, rating(&s, 1, 5, &[])).unwrap().version, 1);
        let state = store.snapshot();
        assert_eq!(state.latest.len(), 2);
        assert_eq!(*state, StoreState::replay(&read_log(&log).unwrap()));
        drop(store);

        // Reopen from snapshot + tail, with a torn final line.
        let mut raw = fs::read_to_string(&log).unwrap();
        raw.push_str("{\"version\":1,\"item_");
        fs::write(&log, raw).unwrap();
        let reopened = RatingStore::open(&log).unwrap();
        assert_eq!(*reopened.snapshot(), *state);
        assert_eq!(reopened.record(&s, rating(&s, 1, 3, &[])).unwrap().version, 2);
        assert_eq!(read_log(&log).unwrap().len(), 4);
    }
}
