//! Pool refinement, threshold-gated beam search over evidence chains, an
//! exhaustive oracle, and the two direct-generation baselines.

use crate::distill::{extract_json_object, filter_chain};
use crate::prompts;
use crate::scorer::{Purpose, Scorer, ScorerError, ScorerRequest, TextRequest, VideoClip};
use crate::types::{EvidenceChain, EvidencePool, EvidenceSegment, QaSample};
use crate::{Span, TimeSpan};
use once_cell::sync::Lazy;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

/// Largest pool the exhaustive oracle accepts.
pub const BRUTE_FORCE_MAX_POOL: usize = 12;
/// Sampling temperature per guided round; later rounds reuse the last value.
pub const GT_ROUND_TEMPERATURES: [f64; 3] = [0.0, 0.7, 1.0];
/// Matched refinement items must overlap a pool segment at least this much.
pub const REFINE_MIN_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Refined pool size.
    pub k: usize,
    /// Beam width.
    pub w: usize,
    /// Acceptance threshold on P(answer | question, chain).
    pub t: f64,
    pub max_iter: usize,
    pub max_hops: usize,
    pub allow_early_stop: bool,
    pub refine_attempts: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 8,
            w: 4,
            t: 0.7,
            max_iter: 3,
            max_hops: 4,
            allow_early_stop: false,
            refine_attempts: 3,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.to_string()));
        if self.w < 1 {
            return bad("W must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.t) {
            return bad("T must be in [0, 1]");
        }
        if self.w > self.k {
            return bad("W must be <= K");
        }
        if self.max_iter < 1 {
            return bad("max_iter must be >= 1");
        }
        if self.max_hops < 1 {
            return bad("max_hops must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("{sample_id}: evidence pool is empty")]
    EmptyPool { sample_id: String },
    #[error("pool of {size} exceeds the exhaustive-search limit {max}")]
    PoolTooLarge { size: usize, max: usize },
    #[error("{sample_id}: no parseable evidence in reply")]
    UnparseableEvidence { sample_id: String, reply: String },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample_id: String,
    pub iteration: usize,
    pub seg_ids: Vec<String>,
    pub score: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub chain: EvidenceChain,
    pub trace: Vec<TraceRecord>,
    /// Beam after every iteration, iteration 0 being the seeded singletons.
    pub beams: Vec<Vec<EvidenceChain>>,
}

/// Score desc, then fewer steps, earlier first start, smaller first id, and
/// finally the full id list.
pub fn chain_order(a: &EvidenceChain, b: &EvidenceChain) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.steps.len().cmp(&b.steps.len()))
        .then_with(|| a.steps[0].span.start.total_cmp(&b.steps[0].span.start))
        .then_with(|| a.steps[0].seg_id.cmp(&b.steps[0].seg_id))
        .then_with(|| a.seg_ids().cmp(&b.seg_ids()))
}

/// P(answer | question, steps).
pub fn score_steps(
    steps: &[EvidenceSegment],
    sample: &QaSample,
    scorer: &dyn Scorer,
) -> Result<f64, ScorerError> {
    let req = ScorerRequest {
        sample_id: sample.sample_id.clone(),
        question: sample.question.clone(),
        options: sample.options.clone(),
        context_text: prompts::chain_transcript(steps),
        purpose: Purpose::ChainScoring,
    };
    Ok(scorer.score_options(&req)?.prob(sample.answer_idx))
}

fn scored_chain(
    steps: Vec<EvidenceSegment>,
    sample: &QaSample,
    scorer: &dyn Scorer,
) -> Result<EvidenceChain, ScorerError> {
    let mut chain = EvidenceChain::new(steps, 0.0).expect("distinct non-empty steps");
    chain.score = score_steps(&chain.steps, sample, scorer)?;
    Ok(chain)
}

fn owned_ids(chain: &EvidenceChain) -> Vec<String> {
    chain.steps.iter().map(|s| s.seg_id.clone()).collect()
}

fn singletons(
    segments: &[EvidenceSegment],
    sample: &QaSample,
    scorer: &dyn Scorer,
) -> Result<Vec<EvidenceChain>, ScorerError> {
    segments
        .par_iter()
        .map(|s| scored_chain(vec![s.clone()], sample, scorer))
        .collect()
}

/// Threshold-gated beam search over the refined pool.
///
/// Every live chain proposes its best single extension; the extension
/// replaces the chain only if it beats both `t` and the chain's own score,
/// otherwise the chain freezes. Chains with the same step set are merged and
/// the beam is cut back to `w`. Stops when every chain is frozen, after
/// `max_iter` rounds, or (with `allow_early_stop`) once any chain exceeds `t`.
pub fn beam_search(
    refined: &EvidencePool,
    sample: &QaSample,
    scorer: &dyn Scorer,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    if refined.is_empty() {
        return Err(SearchError::EmptyPool {
            sample_id: sample.sample_id.clone(),
        });
    }
    let pool = &refined.segments;
    let mut seeds = singletons(pool, sample, scorer)?;
    seeds.sort_by(chain_order);
    let mut beam: Vec<EvidenceChain> = seeds.iter().take(cfg.w).cloned().collect();
    let seeded: HashSet<Vec<String>> = beam.iter().map(owned_ids).collect();
    let mut trace: Vec<TraceRecord> = seeds
        .iter()
        .map(|c| TraceRecord {
            sample_id: sample.sample_id.clone(),
            iteration: 0,
            seg_ids: owned_ids(c),
            score: c.score,
            accepted: seeded.contains(&owned_ids(c)),
        })
        .collect();
    for c in &mut beam {
        if c.hops() >= cfg.max_hops {
            c.frozen = true;
        }
    }
    let mut beams = vec![beam.clone()];

    for iteration in 1..=cfg.max_iter {
        if beam.iter().all(|c| c.frozen) {
            break;
        }
        if cfg.allow_early_stop && beam.iter().any(|c| c.score > cfg.t) {
            break;
        }
        // Each chain's candidate extensions, scored; order of the result
        // follows the beam, so fan-out never affects output.
        let proposals: Vec<Vec<EvidenceChain>> = beam
            .par_iter()
            .map(|chain| {
                if chain.frozen {
                    return Ok(Vec::new());
                }
                pool.iter()
                    .filter(|s| !chain.contains(&s.seg_id))
                    .map(|s| {
                        let mut steps = chain.steps.clone();
                        steps.push(s.clone());
                        scored_chain(steps, sample, scorer)
                    })
                    .collect::<Result<Vec<_>, ScorerError>>()
            })
            .collect::<Result<_, ScorerError>>()?;

        let mut next = Vec::with_capacity(beam.len());
        for (chain, mut candidates) in beam.into_iter().zip(proposals) {
            if chain.frozen {
                next.push(chain);
                continue;
            }
            candidates.sort_by(chain_order);
            let best = candidates.first();
            let accept = best.is_some_and(|b| b.score > cfg.t && b.score > chain.score);
            for (i, c) in candidates.iter().enumerate() {
                trace.push(TraceRecord {
                    sample_id: sample.sample_id.clone(),
                    iteration,
                    seg_ids: owned_ids(c),
                    score: c.score,
                    accepted: accept && i == 0,
                });
            }
            if accept {
                let mut grown = candidates.swap_remove(0);
                grown.frozen = grown.hops() >= cfg.max_hops;
                next.push(grown);
            } else {
                let mut kept = chain;
                kept.frozen = true;
                next.push(kept);
            }
        }
        next.sort_by(chain_order);
        let mut seen = HashSet::new();
        next.retain(|c| {
            let ids: BTreeSet<&str> = c.seg_ids().into_iter().collect();
            seen.insert(ids.into_iter().map(str::to_string).collect::<Vec<_>>())
        });
        next.truncate(cfg.w);
        beam = next;
        beams.push(beam.clone());
    }

    let chain = beam
        .iter()
        .min_by(|a, b| chain_order(a, b))
        .cloned()
        .expect("beam is never empty");
    Ok(SearchOutcome {
        chain,
        trace,
        beams,
    })
}

/// Scores every subset of 1..=`max_len` segments and returns the best.
pub fn brute_force_best_chain(
    refined: &EvidencePool,
    sample: &QaSample,
    scorer: &dyn Scorer,
    max_len: usize,
) -> Result<EvidenceChain, SearchError> {
    let n = refined.len();
    if n > BRUTE_FORCE_MAX_POOL {
        return Err(SearchError::PoolTooLarge {
            size: n,
            max: BRUTE_FORCE_MAX_POOL,
        });
    }
    if n == 0 {
        return Err(SearchError::EmptyPool {
            sample_id: sample.sample_id.clone(),
        });
    }
    let masks: Vec<u32> = (1u32..(1 << n))
        .filter(|m| (m.count_ones() as usize) <= max_len.max(1))
        .collect();
    let chains: Vec<EvidenceChain> = masks
        .par_iter()
        .map(|&m| {
            let steps = (0..n)
                .filter(|i| m & (1 << i) != 0)
                .map(|i| refined.segments[i].clone())
                .collect();
            scored_chain(steps, sample, scorer)
        })
        .collect::<Result<_, ScorerError>>()?;
    Ok(chains
        .into_iter()
        .min_by(chain_order)
        .expect("at least one subset"))
}

/// The refined pool plus whether it came from the ranking fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub pool: EvidencePool,
    pub fallback: bool,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct RefinedItem {
    start_time: f64,
    end_time: f64,
    #[serde(default)]
    evidence: String,
}

fn tokens(s: &str) -> HashSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token-set Jaccard similarity.
pub fn text_similarity(a: &str, b: &str) -> f64 {
    let (a, b) = (tokens(a), tokens(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

fn parse_refinement(reply: &str, duration_s: f64) -> Option<Vec<(TimeSpan, String)>> {
    let v = extract_json_object(reply)?;
    let items: Vec<RefinedItem> = serde_json::from_value(v.get("evidence_chain")?.clone()).ok()?;
    let normalized = items
        .iter()
        .all(|i| i.start_time <= 1.0 && i.end_time <= 1.0);
    let factor = if normalized { duration_s } else { 1.0 };
    Some(
        items
            .into_iter()
            .filter(|i| i.start_time < i.end_time)
            .map(|i| {
                (
                    Span {
                        start: i.start_time * factor,
                        end: i.end_time * factor,
                    },
                    i.evidence,
                )
            })
            .collect(),
    )
}

/// Index of the pool segment an item refers to: best IoU among those
/// reaching [`REFINE_MIN_IOU`] (text similarity breaks ties), else the most
/// textually similar segment with any word in common.
fn match_item(span: &TimeSpan, text: &str, pool: &[EvidenceSegment]) -> Option<usize> {
    let scored: Vec<(usize, f64, f64)> = pool
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                i,
                crate::metrics::iou(span, &s.span),
                text_similarity(text, &s.text),
            )
        })
        .collect();
    let by = |a: &(usize, f64, f64), b: &(usize, f64, f64), first: bool| {
        let (x, y) = if first { (a.1, b.1) } else { (a.2, b.2) };
        let (x2, y2) = if first { (a.2, b.2) } else { (a.1, b.1) };
        y.total_cmp(&x).then(y2.total_cmp(&x2)).then(a.0.cmp(&b.0))
    };
    scored
        .iter()
        .filter(|c| c.1 >= REFINE_MIN_IOU)
        .min_by(|a, b| by(a, b, true))
        .or_else(|| {
            scored
                .iter()
                .filter(|c| c.2 > 0.0)
                .min_by(|a, b| by(a, b, false))
        })
        .map(|c| c.0)
}

/// Cuts the pool down to at most `k` segments.
///
/// Pools of at most `k` segments are kept whole without a model call.
/// Otherwise the narrator picks; its items are matched back to pool
/// segments. If no attempt yields a usable list, the `k` best singletons win.
pub fn refine_pool(
    pool: &EvidencePool,
    sample: &QaSample,
    scorer: &dyn Scorer,
    k: usize,
    attempts: u32,
) -> Result<Refinement, SearchError> {
    if pool.is_empty() {
        return Err(SearchError::EmptyPool {
            sample_id: sample.sample_id.clone(),
        });
    }
    let refined = |segments: Vec<EvidenceSegment>| EvidencePool {
        sample_id: pool.sample_id.clone(),
        segments,
        refined: true,
        dropped: pool.dropped,
    };
    if pool.len() <= k {
        return Ok(Refinement {
            pool: refined(pool.segments.clone()),
            fallback: false,
            attempts: 0,
        });
    }
    let prompt = prompts::refinement(sample, &pool.segments, k);
    let attempts = attempts.max(1);
    for attempt in 0..attempts {
        let mut req = TextRequest::new(&sample.sample_id, prompt.clone(), Purpose::Refinement);
        req.attempt = attempt;
        let reply = scorer.generate_text(&req)?;
        let Some(items) = parse_refinement(&reply, sample.video.duration_s) else {
            log::debug!("{}: malformed refinement reply", sample.sample_id);
            continue;
        };
        let mut picked: Vec<usize> = Vec::new();
        for (span, text) in &items {
            if let Some(i) = match_item(span, text, &pool.segments) {
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
        }
        picked.truncate(k);
        if !picked.is_empty() {
            return Ok(Refinement {
                pool: refined(
                    picked
                        .into_iter()
                        .map(|i| pool.segments[i].clone())
                        .collect(),
                ),
                fallback: false,
                attempts: attempt + 1,
            });
        }
    }
    log::warn!(
        "{}: refinement fell back to singleton ranking",
        sample.sample_id
    );
    let mut ranked = singletons(&pool.segments, sample, scorer)?;
    ranked.sort_by(chain_order);
    let segments = ranked
        .into_iter()
        .take(k)
        .map(|c| c.steps.into_iter().next().expect("singleton"))
        .collect();
    Ok(Refinement {
        pool: refined(segments),
        fallback: true,
        attempts,
    })
}

/// The whole refined pool as one chain (search disabled).
pub fn pool_as_chain(
    refined: &EvidencePool,
    sample: &QaSample,
    scorer: &dyn Scorer,
) -> Result<EvidenceChain, SearchError> {
    if refined.is_empty() {
        return Err(SearchError::EmptyPool {
            sample_id: sample.sample_id.clone(),
        });
    }
    let mut chain = scored_chain(refined.segments.clone(), sample, scorer)?;
    chain.frozen = true;
    Ok(chain)
}

static LOOSE_SPAN: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"\[\s*(\d+(?:\.\d+)?)\s*-\s*(\d+(?:\.\d+)?)\s*(?:seconds?|s)?\s*\]").expect("regex")
});

/// Bracketed spans with the text that follows each, up to the next span.
/// All-normalized values are scaled by the duration; spans that are
/// reversed or run past the video are dropped. Steps get level 0.
pub fn parse_free_evidence(reply: &str, sample_id: &str, duration_s: f64) -> Vec<EvidenceSegment> {
    let caps: Vec<_> = LOOSE_SPAN.captures_iter(reply).collect();
    let raw: Vec<(f64, f64, String)> = caps
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let whole = c.get(0)?;
            let end = caps
                .get(i + 1)
                .and_then(|n| n.get(0))
                .map_or(reply.len(), |m| m.start());
            Some((
                c[1].parse().ok()?,
                c[2].parse().ok()?,
                reply[whole.end()..end].trim().to_string(),
            ))
        })
        .collect();
    let factor = if raw.iter().all(|(a, b, _)| *a <= 1.0 && *b <= 1.0) {
        duration_s
    } else {
        1.0
    };
    let mut spans: Vec<(TimeSpan, String)> = raw
        .into_iter()
        .filter_map(|(a, b, text)| {
            Span::within(a * factor, b * factor, duration_s)
                .ok()
                .map(|s| (s, text))
        })
        .collect();
    spans.sort_by(|x, y| {
        x.0.start
            .total_cmp(&y.0.start)
            .then(x.0.end.total_cmp(&y.0.end))
    });
    spans
        .into_iter()
        .enumerate()
        .map(|(i, (span, text))| EvidenceSegment {
            seg_id: EvidenceSegment::make_id(sample_id, 0, i),
            span,
            level: 0,
            text,
        })
        .collect()
}

fn whole_video(sample: &QaSample) -> VideoClip {
    VideoClip {
        uri: sample.video.uri.clone(),
        t_s: 0.0,
        t_e: sample.video.duration_s,
    }
}

/// One-pass evidence generation. The chain is left unscored.
pub fn direct_multi_evidence(
    sample: &QaSample,
    scorer: &dyn Scorer,
) -> Result<EvidenceChain, SearchError> {
    let mut req = TextRequest::new(
        &sample.sample_id,
        prompts::direct_multi_evidence(sample),
        Purpose::DirectEvidence,
    );
    req.clip = Some(whole_video(sample));
    let reply = scorer.generate_text(&req)?;
    let steps = parse_free_evidence(&reply, &sample.sample_id, sample.video.duration_s);
    EvidenceChain::new(steps, 0.0).map_err(|_| SearchError::UnparseableEvidence {
        sample_id: sample.sample_id.clone(),
        reply,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedOutcome {
    pub chain: EvidenceChain,
    /// 1-based round that produced `chain`.
    pub round: u32,
    pub failed: bool,
}

/// Samples up to `max_rounds` chains, keeping the first the answer filter
/// accepts; otherwise returns the last parseable one flagged as failed.
pub fn gt_guided_sampling(
    sample: &QaSample,
    scorer: &dyn Scorer,
    max_rounds: u32,
) -> Result<GuidedOutcome, SearchError> {
    let prompt = prompts::gt_guided(sample);
    let mut last: Option<GuidedOutcome> = None;
    let mut last_reply = String::new();
    for round in 0..max_rounds.max(1) {
        let mut req = TextRequest::new(&sample.sample_id, prompt.clone(), Purpose::GtGuided);
        req.clip = Some(whole_video(sample));
        req.attempt = round;
        req.temperature =
            GT_ROUND_TEMPERATURES[(round as usize).min(GT_ROUND_TEMPERATURES.len() - 1)];
        let reply = scorer.generate_text(&req)?;
        let steps = parse_free_evidence(&reply, &sample.sample_id, sample.video.duration_s);
        last_reply = reply;
        let Ok(mut chain) = EvidenceChain::new(steps, 0.0) else {
            continue;
        };
        let verdict = filter_chain(&prompts::chain_context(&chain), sample, scorer)?;
        chain.score = verdict.distribution.prob(sample.answer_idx);
        let outcome = GuidedOutcome {
            chain,
            round: round + 1,
            failed: !verdict.pass,
        };
        if verdict.pass {
            return Ok(outcome);
        }
        last = Some(outcome);
    }
    last.ok_or(SearchError::UnparseableEvidence {
        sample_id: sample.sample_id.clone(),
        reply: last_reply,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{evidence_marker, MockScorer, MockWorld};
    use crate::types::VideoRef;

    fn sample(n_opts: usize) -> QaSample {
        QaSample {
            sample_id: "s".into(),
            video: VideoRef {
                id: "v".into(),
                duration_s: 16.0,
                uri: "v.mp4".into(),
            },
            question: "What happens?".into(),
            options: (0..n_opts).map(|i| format!("option {i}")).collect(),
            answer_idx: 1,
            gt_window: None,
        }
    }

    /// `n` one-second segments; those listed in `relevant` carry markers.
    fn pool(n: usize, relevant: &[usize]) -> EvidencePool {
        let segments = (0..n)
            .map(|i| {
                let id = format!("s/L1/{i}");
                let mut text = format!("segment number {i}");
                if relevant.contains(&i) {
                    text.push(' ');
                    text.push_str(&evidence_marker(&id));
                }
                EvidenceSegment {
                    seg_id: id,
                    span: Span {
                        start: i as f64,
                        end: i as f64 + 1.0,
                    },
                    level: 1,
                    text,
                }
            })
            .collect();
        EvidencePool {
            sample_id: "s".into(),
            segments,
            refined: true,
            dropped: 0,
        }
    }

    fn mock(b: f64, relevant: &[usize]) -> MockScorer {
        let ids: Vec<String> = relevant.iter().map(|i| format!("s/L1/{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut w = MockWorld::new(b, 0);
        w.insert("s", 1, &refs);
        MockScorer::new(w)
    }

    fn ids(c: &EvidenceChain) -> Vec<&str> {
        c.seg_ids()
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let c = SearchConfig {
            w: 9,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SearchConfig {
            t: 1.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SearchConfig {
            max_iter: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SearchConfig {
            w: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn recovers_three_relevant_segments_at_default_threshold() {
        let p = pool(8, &[1, 4, 6]);
        let m = mock(0.2, &[1, 4, 6]);
        let out = beam_search(&p, &sample(5), &m, &SearchConfig::default()).unwrap();
        assert_eq!(ids(&out.chain), vec!["s/L1/1", "s/L1/4", "s/L1/6"]);
        assert!((out.chain.score - 1.0).abs() < 1e-12);
        let brute = brute_force_best_chain(&p, &sample(5), &m, 4).unwrap();
        assert_eq!(ids(&brute), ids(&out.chain));
    }

    #[test]
    fn single_segment_pool() {
        let p = pool(1, &[0]);
        let out = beam_search(
            &p,
            &sample(5),
            &mock(0.2, &[0]),
            &SearchConfig {
                k: 1,
                w: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ids(&out.chain), vec!["s/L1/0"]);
        assert!(out.chain.frozen);
        assert_eq!(out.beams.len(), 2);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn empty_pool_errors() {
        let p = pool(0, &[]);
        assert!(matches!(
            beam_search(&p, &sample(5), &mock(0.2, &[0]), &SearchConfig::default()),
            Err(SearchError::EmptyPool { .. })
        ));
    }

    #[test]
    fn high_threshold_freezes_singletons() {
        // |R| = 4 at b = 0.2: a pair scores 0.6, below T = 0.7.
        let p = pool(8, &[0, 2, 4, 6]);
        let out = beam_search(
            &p,
            &sample(5),
            &mock(0.2, &[0, 2, 4, 6]),
            &SearchConfig::default(),
        )
        .unwrap();
        assert_eq!(out.chain.hops(), 1);
        assert!(out.beams.last().unwrap().iter().all(|c| c.frozen));
        assert!(out
            .trace
            .iter()
            .filter(|r| r.iteration > 0)
            .all(|r| !r.accepted));
    }

    #[test]
    fn early_stop_halts_once_threshold_is_crossed() {
        let p = pool(6, &[0, 3]);
        let m = mock(0.2, &[0, 3]);
        let cfg = SearchConfig {
            k: 6,
            t: 0.5,
            allow_early_stop: true,
            ..Default::default()
        };
        // Singletons score 0.6 > 0.5, so no extension round runs.
        let out = beam_search(&p, &sample(5), &m, &cfg).unwrap();
        assert_eq!(out.beams.len(), 1);
        assert_eq!(out.chain.hops(), 1);
    }

    #[test]
    fn multihop_off_keeps_single_steps() {
        let p = pool(8, &[1, 4]);
        let cfg = SearchConfig {
            max_hops: 1,
            t: 0.0,
            ..Default::default()
        };
        let out = beam_search(&p, &sample(5), &mock(0.2, &[1, 4]), &cfg).unwrap();
        assert_eq!(out.chain.hops(), 1);
        assert_eq!(out.beams.len(), 1);
    }

    #[test]
    fn trace_is_deterministic() {
        let p = pool(8, &[2, 5]);
        let m = mock(0.25, &[2, 5]);
        let a = beam_search(&p, &sample(4), &m, &SearchConfig::default()).unwrap();
        let b = beam_search(&p, &sample(4), &m, &SearchConfig::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a.trace).unwrap(),
            serde_json::to_string(&b.trace).unwrap()
        );
        assert_eq!(a.trace.iter().filter(|r| r.iteration == 0).count(), 8);
    }

    #[test]
    fn brute_force_two_segments() {
        let p = pool(2, &[1]);
        let c = brute_force_best_chain(&p, &sample(5), &mock(0.2, &[1]), 2).unwrap();
        assert_eq!(ids(&c), vec!["s/L1/1"]);
    }

    #[test]
    fn brute_force_ties_prefer_short_then_first_id() {
        let p = pool(3, &[]);
        let mut w = MockWorld::new(0.2, 0);
        w.insert("s", 1, &["elsewhere"]);
        let c = brute_force_best_chain(&p, &sample(5), &MockScorer::new(w), 3).unwrap();
        assert_eq!(ids(&c), vec!["s/L1/0"]);
    }

    #[test]
    fn brute_force_pool_limit() {
        let p = pool(13, &[0]);
        assert!(matches!(
            brute_force_best_chain(&p, &sample(5), &mock(0.2, &[0]), 2),
            Err(SearchError::PoolTooLarge { size: 13, .. })
        ));
    }

    fn unrefined(n: usize, relevant: &[usize]) -> EvidencePool {
        EvidencePool {
            refined: false,
            ..pool(n, relevant)
        }
    }

    #[test]
    fn small_pool_is_kept_whole() {
        let m = mock(0.2, &[0]);
        let r = refine_pool(&unrefined(3, &[0]), &sample(5), &m, 8, 3).unwrap();
        assert_eq!(r.pool.len(), 3);
        assert!(r.pool.refined);
        assert_eq!(m.telemetry().unwrap().snapshot().calls, 0);
    }

    #[test]
    fn mock_refinement_keeps_relevant_first() {
        let m = mock(0.2, &[3, 11]);
        let r = refine_pool(&unrefined(16, &[3, 11]), &sample(5), &m, 8, 3).unwrap();
        assert!(!r.fallback);
        assert_eq!(r.pool.len(), 8);
        assert!(r.pool.get("s/L1/3").is_some() && r.pool.get("s/L1/11").is_some());
    }

    #[test]
    fn garbage_refinement_falls_back_to_ranking() {
        let m = mock(0.2, &[3, 11]).with_canned(Purpose::Refinement, vec!["no json".into()]);
        let r = refine_pool(&unrefined(16, &[3, 11]), &sample(5), &m, 8, 2).unwrap();
        assert!(r.fallback);
        assert_eq!(r.pool.len(), 8);
        assert_eq!(r.pool.segments[0].seg_id, "s/L1/3");
        assert_eq!(r.pool.segments[1].seg_id, "s/L1/11");
    }

    #[test]
    fn refinement_items_match_by_overlap_then_text() {
        let reply = r#"{"evidence_chain": [
            {"start_time": 5.1, "end_time": 6.0, "evidence": "x"},
            {"start_time": 40.0, "end_time": 41.0, "evidence": "segment number 9"}
        ]}"#;
        let m = mock(0.2, &[0]).with_canned(Purpose::Refinement, vec![reply.into()]);
        let r = refine_pool(&unrefined(12, &[0]), &sample(5), &m, 4, 1).unwrap();
        let got: Vec<_> = r.pool.segments.iter().map(|s| s.seg_id.as_str()).collect();
        assert_eq!(got, vec!["s/L1/5", "s/L1/9"]);
    }

    #[test]
    fn direct_evidence_parses_and_sorts() {
        let m = mock(0.2, &[0]).with_canned(
            Purpose::DirectEvidence,
            vec!["[0.5-0.9] dog approaches. [0.1-0.3] girl waves.".into()],
        );
        let c = direct_multi_evidence(&sample(5), &m).unwrap();
        assert_eq!(c.hops(), 2);
        assert_eq!(
            c.steps[0].span,
            Span {
                start: 1.6,
                end: 4.8
            }
        );
        assert_eq!(c.steps[0].text, "girl waves.");
        assert_eq!(c.steps[1].text, "dog approaches.");
        assert!(c.steps.iter().all(|s| s.level == 0));
    }

    #[test]
    fn direct_evidence_without_brackets() {
        let m = mock(0.2, &[0]).with_canned(
            Purpose::DirectEvidence,
            vec!["The girl waves at the dog.".into()],
        );
        assert!(matches!(
            direct_multi_evidence(&sample(5), &m),
            Err(SearchError::UnparseableEvidence { .. })
        ));
    }

    fn guided(replies: &[&str]) -> MockScorer {
        mock(0.2, &[0, 1]).with_canned(
            Purpose::GtGuided,
            replies.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn guided_first_round_passes() {
        let good = format!(
            "[1-2] a {} [3-4] b {}",
            evidence_marker("s/L1/0"),
            evidence_marker("s/L1/1")
        );
        let out = gt_guided_sampling(&sample(5), &guided(&[&good]), 3).unwrap();
        assert_eq!((out.round, out.failed), (1, false));
    }

    #[test]
    fn guided_second_round_passes() {
        let good = format!(
            "[1-2] a {} [3-4] b {}",
            evidence_marker("s/L1/0"),
            evidence_marker("s/L1/1")
        );
        let out = gt_guided_sampling(&sample(5), &guided(&["[1-2] nothing", &good]), 3).unwrap();
        assert_eq!((out.round, out.failed), (2, false));
    }

    #[test]
    fn guided_all_rounds_fail() {
        let out = gt_guided_sampling(
            &sample(5),
            &guided(&["[1-2] one", "[2-3] two", "[5-6] three"]),
            3,
        )
        .unwrap();
        assert_eq!((out.round, out.failed), (3, true));
        assert_eq!(out.chain.steps[0].text, "three");
    }

    #[test]
    fn text_similarity_bounds() {
        assert_eq!(text_similarity("a dog runs", "A dog runs."), 1.0);
        assert_eq!(text_similarity("", ""), 0.0);
        assert!((text_similarity("a b", "b c") - 1.0 / 3.0).abs() < 1e-12);
    }
}
