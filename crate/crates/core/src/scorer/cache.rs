use super::{Scorer, ScorerError, ScorerRequest, Telemetry, TextRequest};
use crate::hashing::digest_hex;
use crate::prompts;
use crate::types::OptionDistribution;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

/// One line of the append-only cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub cache_key: String,
    pub prompt_hash: String,
    pub text: String,
    pub timestamp: u64,
}

/// Key over (endpoint/model identity, purpose, sampling settings, attachment, prompt).
pub fn cache_key(identity: &str, purpose: &str, variant: &str, prompt: &str) -> String {
    digest_hex(&[identity, purpose, variant, prompt])
}

fn text_variant(req: &TextRequest) -> String {
    let clip = req
        .clip
        .as_ref()
        .map(|c| format!("{}|{}|{}", c.uri, c.t_s, c.t_e))
        .unwrap_or_default();
    format!("t={}|a={}|clip={clip}", req.temperature, req.attempt)
}

/// Memoizes a scorer in memory and, optionally, in an append-only file.
/// Errors are never cached.
pub struct CachedScorer<S> {
    inner: S,
    entries: RwLock<HashMap<String, String>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
    telemetry: Telemetry,
}

impl<S: Scorer> CachedScorer<S> {
    pub fn in_memory(inner: S) -> Self {
        Self {
            inner,
            entries: RwLock::new(HashMap::new()),
            file: None,
            path: None,
            telemetry: Telemetry::default(),
        }
    }

    /// Loads every record of `path` (later records win) and appends new ones.
    pub fn open(inner: S, path: &Path) -> Result<Self, ScorerError> {
        let io = |e: std::io::Error| ScorerError::Cache(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io)?;
            }
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for line in reader.lines() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line from an interrupted run is skipped.
                if let Ok(rec) = serde_json::from_str::<CacheRecord>(&line) {
                    entries.insert(rec.cache_key, rec.text);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            inner,
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
            telemetry: Telemetry::default(),
        })
    }

    pub fn inner(&self) -> &S {
        &self.inner
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

    fn lookup(&self, key: &str) -> Option<String> {
        let hit = self.entries.read().expect("cache lock").get(key).cloned();
        match &hit {
            Some(_) => self.telemetry.record_hit(),
            None => self.telemetry.record_miss(),
        }
        hit
    }

    fn store(&self, key: String, prompt: &str, text: &str) -> Result<(), ScorerError> {
        if let Some(file) = &self.file {
            let rec = CacheRecord {
                cache_key: key.clone(),
                prompt_hash: digest_hex(&[prompt]),
                text: text.to_string(),
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            let mut line = serde_json::to_string(&rec).expect("cache record json");
            line.push('\n');
            let mut f = file.lock().expect("cache file lock");
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| ScorerError::Cache(e.to_string()))?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(key, text.to_string());
        Ok(())
    }
}

impl<S: Scorer> Scorer for CachedScorer<S> {
    fn score_options(&self, req: &ScorerRequest) -> Result<OptionDistribution, ScorerError> {
        let prompt = prompts::answer_scoring(&req.question, &req.options, &req.context_text);
        let key = cache_key(
            &self.inner.identity(),
            req.purpose.as_str(),
            "score",
            &prompt,
        );
        if let Some(text) = self.lookup(&key) {
            if let Ok(dist) = serde_json::from_str::<OptionDistribution>(&text) {
                return Ok(dist);
            }
        }
        self.telemetry.record_call();
        let dist = self.inner.score_options(req)?;
        let text = serde_json::to_string(&dist).expect("distribution json");
        self.store(key, &prompt, &text)?;
        Ok(dist)
    }

    fn generate_text(&self, req: &TextRequest) -> Result<String, ScorerError> {
        let key = cache_key(
            &self.inner.identity(),
            req.purpose.as_str(),
            &text_variant(req),
            &req.prompt,
        );
        if let Some(text) = self.lookup(&key) {
            return Ok(text);
        }
        self.telemetry.record_call();
        let text = self.inner.generate_text(req)?;
        self.store(key, &req.prompt, &text)?;
        Ok(text)
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }

    /// Counters of this layer: `calls` are the requests that missed the cache.
    fn telemetry(&self) -> Option<&Telemetry> {
        Some(&self.telemetry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{MockScorer, MockWorld, Purpose};

    fn mock() -> MockScorer {
        let mut w = MockWorld::new(0.2, 1);
        w.insert("s", 0, &["s/L1/0"]);
        MockScorer::new(w)
    }

    #[test]
    fn warm_file_cache_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let req = TextRequest::new("s", "describe".into(), Purpose::Summarization);
        let first = CachedScorer::open(mock(), &path).unwrap();
        let a = first.generate_text(&req).unwrap();
        assert_eq!(first.telemetry().unwrap().snapshot().calls, 1);
        drop(first);

        let second = CachedScorer::open(mock(), &path).unwrap();
        assert_eq!(second.generate_text(&req).unwrap(), a);
        let snap = second.telemetry().unwrap().snapshot();
        assert_eq!((snap.calls, snap.cache_hits), (0, 1));
        assert_eq!(second.inner().telemetry().unwrap().snapshot().calls, 0);
    }

    #[test]
    fn key_separates_attachment_and_temperature() {
        let c = CachedScorer::in_memory(mock());
        let mut req = TextRequest::new("s", "same prompt".into(), Purpose::GtGuided);
        c.generate_text(&req).unwrap();
        req.temperature = 0.7;
        c.generate_text(&req).unwrap();
        req.clip = Some(crate::scorer::VideoClip {
            uri: "v.mp4".into(),
            t_s: 0.0,
            t_e: 1.0,
        });
        c.generate_text(&req).unwrap();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn scores_round_trip_through_cache() {
        let c = CachedScorer::in_memory(mock());
        let req = ScorerRequest {
            sample_id: "s".into(),
            question: "q".into(),
            options: vec!["a".into(), "b".into()],
            context_text: "[ref:s/L1/0]".into(),
            purpose: Purpose::ChainScoring,
        };
        let a = c.score_options(&req).unwrap();
        let b = c.score_options(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(c.telemetry().unwrap().snapshot().calls, 1);
    }

    #[test]
    fn failures_are_not_cached() {
        let mut w = MockWorld::new(0.2, 1);
        w.insert("s", 0, &["s/L1/0"]);
        w.samples
            .get_mut("s")
            .unwrap()
            .caption_failures
            .insert("s/L1/3".into());
        let c = CachedScorer::in_memory(MockScorer::new(w));
        let mut req = TextRequest::new("s", "p".into(), Purpose::Captioning);
        req.seg_id = Some("s/L1/3".into());
        assert!(c.generate_text(&req).is_err());
        assert!(c.generate_text(&req).is_err());
        assert_eq!(c.telemetry().unwrap().snapshot().calls, 2);
        assert!(c.is_empty());
    }
}
