//! Evidence pool construction: one question-conditioned narration per segment.

use crate::prompts::{self, EVIDENCE_TAG};
use crate::scorer::{Purpose, Scorer, ScorerError, TextRequest, VideoClip};
use crate::types::{EvidencePool, EvidenceSegment, QaSample};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub max_attempts: u32,
    pub min_pool_size: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            min_pool_size: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionJob {
    pub sample_id: String,
    pub seg_id: String,
    pub prompt: String,
    pub status: JobStatus,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoolError {
    #[error("{sample_id}: only {captioned} of {total} segments captioned, need {required}")]
    PoolTooSparse {
        sample_id: String,
        captioned: usize,
        total: usize,
        required: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolBuild {
    pub pool: EvidencePool,
    pub jobs: Vec<CaptionJob>,
}

pub fn render_caption_prompt(sample: &QaSample, _seg: &EvidenceSegment) -> String {
    prompts::narration(&sample.question)
}

/// Trims and drops an echoed `Evidence:` tag.
pub fn clean_evidence_text(raw: &str) -> String {
    let t = raw.trim();
    let t = t.strip_prefix(EVIDENCE_TAG).unwrap_or(t);
    t.trim().to_string()
}

fn run_job(
    sample: &QaSample,
    seg: &EvidenceSegment,
    scorer: &dyn Scorer,
    cfg: &PoolConfig,
) -> (CaptionJob, Option<String>) {
    let prompt = render_caption_prompt(sample, seg);
    let mut job = CaptionJob {
        sample_id: sample.sample_id.clone(),
        seg_id: seg.seg_id.clone(),
        prompt: prompt.clone(),
        status: JobStatus::Pending,
        attempts: 0,
        last_error: None,
    };
    while job.attempts < cfg.max_attempts.max(1) {
        let req = TextRequest {
            sample_id: sample.sample_id.clone(),
            seg_id: Some(seg.seg_id.clone()),
            prompt: prompt.clone(),
            purpose: Purpose::Captioning,
            clip: Some(VideoClip {
                uri: sample.video.uri.clone(),
                t_s: seg.span.start,
                t_e: seg.span.end,
            }),
            temperature: 0.0,
            attempt: job.attempts,
        };
        job.attempts += 1;
        let outcome = scorer.generate_text(&req).and_then(|raw| {
            let text = clean_evidence_text(&raw);
            if text.is_empty() {
                Err(ScorerError::malformed("empty narration", raw))
            } else {
                Ok(text)
            }
        });
        match outcome {
            Ok(text) => {
                job.status = JobStatus::Done;
                job.last_error = None;
                return (job, Some(text));
            }
            Err(e) => job.last_error = Some(e.to_string()),
        }
    }
    job.status = JobStatus::Failed;
    log::warn!(
        "{}: dropping {} after {} attempts",
        sample.sample_id,
        seg.seg_id,
        job.attempts
    );
    (job, None)
}

/// Narrates every segment, dropping the ones whose narration keeps failing.
///
/// Jobs run on the current rayon pool; the result is assembled in input
/// order whatever order the jobs finish in. The sparsity floor is
/// `min(min_pool_size, segments.len())`, at least one.
pub fn build_pool(
    sample: &QaSample,
    segments: &[EvidenceSegment],
    scorer: &dyn Scorer,
    cfg: &PoolConfig,
) -> Result<PoolBuild, PoolError> {
    let results: Vec<(CaptionJob, Option<String>)> = segments
        .par_iter()
        .map(|seg| run_job(sample, seg, scorer, cfg))
        .collect();
    let mut kept = Vec::with_capacity(segments.len());
    let mut jobs = Vec::with_capacity(segments.len());
    for (seg, (job, text)) in segments.iter().zip(results) {
        if let Some(text) = text {
            kept.push(EvidenceSegment {
                text,
                ..seg.clone()
            });
        }
        jobs.push(job);
    }
    let required = cfg.min_pool_size.min(segments.len()).max(1);
    if kept.len() < required {
        return Err(PoolError::PoolTooSparse {
            sample_id: sample.sample_id.clone(),
            captioned: kept.len(),
            total: segments.len(),
            required,
        });
    }
    Ok(PoolBuild {
        pool: EvidencePool {
            sample_id: sample.sample_id.clone(),
            dropped: segments.len() - kept.len(),
            segments: kept,
            refined: false,
        },
        jobs,
    })
}
