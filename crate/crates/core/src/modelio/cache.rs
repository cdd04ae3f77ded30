//! Append-only JSONL prediction cache keyed by content digest.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::protocol::{ItemInput, RequestParams};
use crate::digest::FieldHasher;
use crate::error::{CatError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_id: String,
    pub label: String,
    pub raw: String,
}

/// Stable digest over everything that determines a model's answer.
pub fn cache_key(model_id: &str, input: &ItemInput, params: &RequestParams) -> String {
    let mut h = FieldHasher::new("prediction");
    h.str(model_id);
    match input {
        ItemInput::Pair { part1, part2 } => {
            h.str("pair").str(part1).str(part2);
        }
        ItemInput::Prompt { prompt } => {
            h.str("prompt").str(prompt);
        }
    }
    h.u64(params.max_new_tokens as u64).u64(params.greedy as u64);
    h.finish_hex()
}

/// Concurrent reads, serialized appends. With no backing file the cache is
/// purely in memory.
pub struct PredictionCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl PredictionCache {
    pub fn in_memory() -> Self {
        PredictionCache {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (creating if needed) a cache file. A torn final line left by an
    /// interrupted append is ignored; corruption anywhere else is an error.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CatError::io(dir, e))?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| CatError::io(path, e))?;
            let mut offset = 0usize;
            let mut keep = text.len();
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            for (i, line) in lines.iter().enumerate() {
                let start = offset;
                offset += line.len();
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(line) {
                    Ok(e) => {
                        entries.insert(e.key.clone(), e);
                    }
                    Err(err) if i + 1 == lines.len() && !line.ends_with('\n') => {
                        log::warn!("{}: dropping torn last line: {err}", path.display());
                        keep = start;
                    }
                    Err(err) => {
                        return Err(CatError::Parse {
                            path: path.to_path_buf(),
                            line: i + 1,
                            message: err.to_string(),
                        })
                    }
                }
            }
            if keep < text.len() {
                let f = OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(|e| CatError::io(path, e))?;
                f.set_len(keep as u64).map_err(|e| CatError::io(path, e))?;
            } else if !text.is_empty() && !text.ends_with('\n') {
                let mut f = OpenOptions::new()
                    .append(true)
                    .open(path)
                    .map_err(|e| CatError::io(path, e))?;
                f.write_all(b"\n").map_err(|e| CatError::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CatError::io(path, e))?;
        Ok(PredictionCache {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    /// Records entries in memory and appends them to the file.
    pub fn put_all(&self, new: Vec<CacheEntry>) -> Result<()> {
        if new.is_empty() {
            return Ok(());
        }
        let mut writer = self.writer.lock().expect("cache writer lock");
        if let Some(w) = writer.as_mut() {
            let path = self.path.as_deref().unwrap_or(Path::new("<cache>"));
            for e in &new {
                let line = serde_json::to_string(e).expect("cache entry serializes");
                writeln!(w, "{line}").map_err(|err| CatError::io(path, err))?;
            }
            w.flush().map_err(|err| CatError::io(path, err))?;
        }
        let mut entries = self.entries.write().expect("cache lock");
        for e in new {
            entries.insert(e.key.clone(), e);
        }
        Ok(())
    }

    /// Rewrites the file with one line per key, sorted by key.
    pub fn compact(&self) -> Result<usize> {
        let Some(path) = self.path.as_deref() else {
            return Ok(self.len());
        };
        let mut writer = self.writer.lock().expect("cache writer lock");
        let entries = self.entries.read().expect("cache lock");
        let mut sorted: Vec<&CacheEntry> = entries.values().collect();
        sorted.sort_by(|a, b| a.key.cmp(&b.key));
        let tmp = path.with_extension("compact.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(|e| CatError::io(&tmp, e))?);
            for e in &sorted {
                let line = serde_json::to_string(e).expect("cache entry serializes");
                writeln!(w, "{line}").map_err(|err| CatError::io(&tmp, err))?;
            }
            w.flush().map_err(|err| CatError::io(&tmp, err))?;
        }
        fs::rename(&tmp, path).map_err(|e| CatError::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| CatError::io(path, e))?;
        *writer = Some(BufWriter::new(file));
        Ok(sorted.len())
    }
}
