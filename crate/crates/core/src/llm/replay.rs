use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{LlmBackend, LlmError, LlmRequest};

/// One line of the append-only replay cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub hash: String,
    pub prompt_digest: String,
    pub response: String,
}

/// Record/replay cache keyed by [`LlmRequest::request_hash`].
///
/// On a miss, strict mode fails; otherwise the wrapped backend answers and
/// the response is appended to the cache file.
pub struct ReplayBackend {
    path: PathBuf,
    strict: bool,
    inner: Option<Arc<dyn LlmBackend>>,
    cache: RwLock<HashMap<String, String>>,
    writer: Mutex<File>,
}

impl ReplayBackend {
    pub fn open(
        path: &Path,
        strict: bool,
        inner: Option<Arc<dyn LlmBackend>>,
    ) -> Result<Self, LlmError> {
        let cache_err = |message: String| LlmError::Cache {
            path: path.display().to_string(),
            message,
        };
        if !strict && inner.is_none() {
            return Err(LlmError::Config(
                "non-strict replay needs an inner backend".into(),
            ));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| cache_err(e.to_string()))?;
        }
        let mut cache = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| cache_err(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: ReplayEntry = serde_json::from_str(&line)
                    .map_err(|e| cache_err(format!("line {}: {e}", i + 1)))?;
                cache.entry(entry.hash).or_insert(entry.response);
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| cache_err(e.to_string()))?;
        Ok(Self {
            path: path.to_path_buf(),
            strict,
            inner,
            cache: RwLock::new(cache),
            writer: Mutex::new(writer),
        })
    }

    pub fn len(&self) -> usize {
        self.cache.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, hash: &str) -> Option<String> {
        self.cache
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(hash)
            .cloned()
    }
}

impl LlmBackend for ReplayBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let hash = request.request_hash();
        if let Some(hit) = self.lookup(&hash) {
            return Ok(hit);
        }
        let inner = match (&self.inner, self.strict) {
            (Some(inner), false) => inner,
            _ => return Err(LlmError::ReplayMiss(hash)),
        };
        let response = inner.complete(request)?;

        let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        // another thread may have recorded the same request meanwhile
        if let Some(hit) = self.lookup(&hash) {
            return Ok(hit);
        }
        let entry = ReplayEntry {
            hash: hash.clone(),
            prompt_digest: request.prompt_digest(),
            response: response.clone(),
        };
        let mut line =
            serde_json::to_string(&entry).map_err(|e| LlmError::Malformed(e.to_string()))?;
        line.push('\n');
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| LlmError::Cache {
                path: self.path.display().to_string(),
                message: e.to_string(),
            })?;
        self.cache
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(hash, response.clone());
        Ok(response)
    }
}
