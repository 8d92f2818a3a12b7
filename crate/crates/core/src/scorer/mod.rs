//! The model-call boundary.
//!
//! Every language/vision model call in the pipeline goes through [`Scorer`]:
//! option likelihoods for chain scoring and filtering, and free text for
//! narration, refinement and summarization. [`MockScorer`] answers from a
//! hidden relevance world for offline runs; [`RemoteScorer`] talks to a chat
//! completion endpoint; [`CachedScorer`] memoizes either.

mod cache;
mod mock;
mod remote;

pub use cache::{cache_key, CacheRecord, CachedScorer};
pub use mock::{evidence_marker, MockSample, MockScorer, MockWorld};
pub use remote::{RemoteConfig, RemoteScorer};

use crate::types::{DistributionError, OptionDistribution};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Captioning,
    Refinement,
    Summarization,
    ChainScoring,
    Filtering,
    DirectEvidence,
    GtGuided,
}

impl Purpose {
    pub fn as_str(&self) -> &'static str {
        match self {
            Purpose::Captioning => "captioning",
            Purpose::Refinement => "refinement",
            Purpose::Summarization => "summarization",
            Purpose::ChainScoring => "chain_scoring",
            Purpose::Filtering => "filtering",
            Purpose::DirectEvidence => "direct_evidence",
            Purpose::GtGuided => "gt_guided",
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Option-likelihood query: P(option | question, context).
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerRequest {
    /// Correlation id; remote endpoints never see it.
    pub sample_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub context_text: String,
    pub purpose: Purpose,
}

/// A time range of a video, attached to narration requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub uri: String,
    pub t_s: f64,
    pub t_e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextRequest {
    pub sample_id: String,
    /// Segment being narrated, when there is one.
    pub seg_id: Option<String>,
    pub prompt: String,
    pub purpose: Purpose,
    pub clip: Option<VideoClip>,
    pub temperature: f64,
    /// Retry index; part of the cache key so retries can differ.
    pub attempt: u32,
}

impl TextRequest {
    pub fn new(sample_id: &str, prompt: String, purpose: Purpose) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            seg_id: None,
            prompt,
            purpose,
            clip: None,
            temperature: 0.0,
            attempt: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScorerError {
    #[error("endpoint unavailable after {attempts} attempts: {detail}")]
    RemoteUnavailable {
        attempts: u32,
        detail: String,
        payload: String,
    },
    #[error("malformed response: {detail}")]
    MalformedResponse { detail: String, payload: String },
    #[error("cache i/o: {0}")]
    Cache(String),
}

impl ScorerError {
    pub fn malformed(detail: impl Into<String>, payload: impl Into<String>) -> Self {
        Self::MalformedResponse {
            detail: detail.into(),
            payload: payload.into(),
        }
    }

    pub fn payload(&self) -> &str {
        match self {
            Self::RemoteUnavailable { payload, .. } | Self::MalformedResponse { payload, .. } => {
                payload
            }
            Self::Cache(_) => "",
        }
    }
}

impl From<DistributionError> for ScorerError {
    fn from(e: DistributionError) -> Self {
        Self::malformed(e.to_string(), "")
    }
}

pub trait Scorer: Send + Sync {
    fn score_options(&self, req: &ScorerRequest) -> Result<OptionDistribution, ScorerError>;

    fn generate_text(&self, req: &TextRequest) -> Result<String, ScorerError>;

    /// Endpoint and model identity; namespaces cache keys.
    fn identity(&self) -> String;

    fn telemetry(&self) -> Option<&Telemetry> {
        None
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score_options(&self, req: &ScorerRequest) -> Result<OptionDistribution, ScorerError> {
        (**self).score_options(req)
    }
    fn generate_text(&self, req: &TextRequest) -> Result<String, ScorerError> {
        (**self).generate_text(req)
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn telemetry(&self) -> Option<&Telemetry> {
        (**self).telemetry()
    }
}

impl<S: Scorer + ?Sized> Scorer for Arc<S> {
    fn score_options(&self, req: &ScorerRequest) -> Result<OptionDistribution, ScorerError> {
        (**self).score_options(req)
    }
    fn generate_text(&self, req: &TextRequest) -> Result<String, ScorerError> {
        (**self).generate_text(req)
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn telemetry(&self) -> Option<&Telemetry> {
        (**self).telemetry()
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn score_options(&self, req: &ScorerRequest) -> Result<OptionDistribution, ScorerError> {
        (**self).score_options(req)
    }
    fn generate_text(&self, req: &TextRequest) -> Result<String, ScorerError> {
        (**self).generate_text(req)
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn telemetry(&self) -> Option<&Telemetry> {
        (**self).telemetry()
    }
}

/// Call counters. `calls` counts requests reaching the underlying model,
/// `attempts` counts transport attempts including retries.
#[derive(Debug, Default)]
pub struct Telemetry {
    calls: AtomicU64,
    attempts: AtomicU64,
    failures: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub calls: u64,
    pub attempts: u64,
    pub failures: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl Telemetry {
    pub fn record_call(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
    pub fn record_attempt(&self) {
        self.attempts.fetch_add(1, Ordering::Relaxed);
    }
    pub fn record_failure(&self) {
        self.failures.fetch_add(1, Ordering::Relaxed);
    }
    pub fn record_hit(&self) {
        self.cache_hits.fetch_add(1, Ordering::Relaxed);
    }
    pub fn record_miss(&self) {
        self.cache_misses.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> TelemetrySnapshot {
        TelemetrySnapshot {
            calls: self.calls.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            cache_misses: self.cache_misses.load(Ordering::Relaxed),
        }
    }
}
