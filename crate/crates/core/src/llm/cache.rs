use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{CacheKey, FinishReason, LlmError, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheEntry {
    Chat {
        text: String,
        finish_reason: FinishReason,
        usage: Usage,
    },
    Embedding(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    key: CacheKey,
    entry: CacheEntry,
}

/// Append-only response log with an in-memory index rebuilt on open.
///
/// Later lines for the same key win, so a truncated final line is the only
/// possible damage from a crash and is skipped on reload.
pub struct ResponseCache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<CacheKey, CacheEntry>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            path: None,
            index: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let cache_err = |e: std::io::Error| LlmError::Cache(format!("{}: {e}", path.display()));
        let mut index = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(cache_err)?);
            for line in reader.lines() {
                let line = line.map_err(cache_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LogLine>(&line) {
                    Ok(rec) => {
                        index.insert(rec.key, rec.entry);
                    }
                    Err(e) => tracing::warn!("skipping unreadable cache line: {e}"),
                }
            }
        } else if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(cache_err)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(cache_err)?;
        let ends_mid_line = fs::read(path)
            .map(|b| b.last().is_some_and(|&c| c != b'\n'))
            .map_err(cache_err)?;
        if ends_mid_line {
            file.write_all(b"\n").map_err(cache_err)?;
        }
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            index: RwLock::new(index),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        self.index.read().unwrap().get(key).cloned()
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.index.read().unwrap().contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&self, key: CacheKey, entry: CacheEntry) -> Result<(), LlmError> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&LogLine {
                key,
                entry: entry.clone(),
            })
            .map_err(|e| LlmError::Cache(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| LlmError::Cache(e.to_string()))?;
        }
        self.index.write().unwrap().insert(key, entry);
        Ok(())
    }
}
