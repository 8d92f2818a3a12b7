//! Chain summarization, the answer-consistency filter and training-record emission.

use crate::metrics::parse_spans;
use crate::prompts;
use crate::scorer::{Purpose, Scorer, ScorerError, ScorerRequest, TextRequest};
use crate::types::{
    match_option, DistilledSample, EvidenceChain, EvidenceStep, OptionDistribution, QaSample,
    TargetMode,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet, HashSet};

/// Span endpoints may overshoot the video end by this much (rounding in replies).
pub const SPAN_SLACK_S: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistillError {
    #[error("{sample_id}: unparseable summary after {attempts} attempts: {reason}")]
    UnparseableSummary {
        sample_id: String,
        attempts: u32,
        reason: String,
        reply: String,
    },
    #[error("{sample_id}: summary cites no time span")]
    SpanlessSummary { sample_id: String, reply: String },
    #[error("{sample_id}: summary cites a span outside [0, {duration_s}]")]
    SpanOutOfRange { sample_id: String, duration_s: f64 },
    #[error("{sample_id}: chain has no captioned steps")]
    EmptyChain { sample_id: String },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

/// What the answer filter reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOn {
    /// The summarized chain of thought.
    #[default]
    Cot,
    /// The raw step transcript.
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    #[default]
    SummarizeThenFilter,
    FilterThenSummarize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub modes: BTreeSet<TargetMode>,
    pub filter_on: FilterOn,
    pub order: StageOrder,
    pub summarize_attempts: u32,
    /// Emit records even when the filter rejects the chain.
    pub override_filter: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            modes: TargetMode::ALL.into_iter().collect(),
            filter_on: FilterOn::Cot,
            order: StageOrder::SummarizeThenFilter,
            summarize_attempts: 3,
            override_filter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cot_text: String,
    pub predicted_answer_idx: usize,
}

/// Pulls the outermost `{...}` object out of a reply (code fences and chatter
/// around it are ignored).
pub(crate) fn extract_json_object(reply: &str) -> Option<Value> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end <= start {
        return None;
    }
    serde_json::from_str(&reply[start..=end]).ok()
}

fn parse_summary_reply(reply: &str, sample: &QaSample) -> Result<(String, usize), String> {
    let v = extract_json_object(reply).ok_or("no JSON object in reply")?;
    let cot = v
        .get("full_chain_of_thought")
        .and_then(Value::as_str)
        .ok_or("missing full_chain_of_thought")?;
    let answer = match v.get("final_answer") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("missing final_answer".into()),
    };
    let idx = match_option(&answer, &sample.options)
        .ok_or_else(|| format!("final_answer {answer:?} matches no option"))?;
    Ok((cot.trim().to_string(), idx))
}

/// Rewrites a chain into a time-citing chain of thought.
pub fn summarize_chain(
    chain: &EvidenceChain,
    sample: &QaSample,
    scorer: &dyn Scorer,
    attempts: u32,
) -> Result<Summary, DistillError> {
    if chain.steps.is_empty() || chain.steps.iter().all(|s| s.text.is_empty()) {
        return Err(DistillError::EmptyChain {
            sample_id: sample.sample_id.clone(),
        });
    }
    let prompt = prompts::chain_of_thought(sample, &chain.steps);
    let attempts = attempts.max(1);
    let mut last: Option<DistillError> = None;
    for attempt in 0..attempts {
        let mut req = TextRequest::new(&sample.sample_id, prompt.clone(), Purpose::Summarization);
        req.attempt = attempt;
        req.temperature = if attempt == 0 { 0.0 } else { 0.7 };
        let reply = scorer.generate_text(&req)?;
        let (cot, idx) = match parse_summary_reply(&reply, sample) {
            Ok(parsed) => parsed,
            Err(reason) => {
                last = Some(DistillError::UnparseableSummary {
                    sample_id: sample.sample_id.clone(),
                    attempts: attempt + 1,
                    reason,
                    reply,
                });
                continue;
            }
        };
        let duration = sample.video.duration_s;
        let spans = parse_spans(&cot, Some(duration));
        if spans.is_empty() {
            last = Some(DistillError::SpanlessSummary {
                sample_id: sample.sample_id.clone(),
                reply,
            });
            continue;
        }
        if spans.iter().any(|s| s.end > duration + SPAN_SLACK_S) {
            last = Some(DistillError::SpanOutOfRange {
                sample_id: sample.sample_id.clone(),
                duration_s: duration,
            });
            continue;
        }
        return Ok(Summary {
            cot_text: cot,
            predicted_answer_idx: idx,
        });
    }
    Err(last.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub pass: bool,
    pub distribution: OptionDistribution,
}

/// Keeps a chain only when the answer is the unique most likely option given
/// the context; a shared maximum fails.
pub fn filter_chain(
    context: &str,
    sample: &QaSample,
    scorer: &dyn Scorer,
) -> Result<FilterVerdict, ScorerError> {
    let req = ScorerRequest {
        sample_id: sample.sample_id.clone(),
        question: sample.question.clone(),
        options: sample.options.clone(),
        context_text: context.to_string(),
        purpose: Purpose::Filtering,
    };
    let distribution = scorer.score_options(&req)?;
    Ok(verdict_for(distribution, sample.answer_idx))
}

pub fn verdict_for(distribution: OptionDistribution, answer_idx: usize) -> FilterVerdict {
    FilterVerdict {
        pass: distribution.unique_argmax() == Some(answer_idx),
        distribution,
    }
}

/// One record per requested mode for a chain that passed the filter.
/// A rejected chain yields nothing unless `override_filter` is set.
pub fn emit_training_samples(
    sample: &QaSample,
    chain: &EvidenceChain,
    cot_text: &str,
    modes: &BTreeSet<TargetMode>,
    passed: bool,
    override_filter: bool,
) -> Vec<DistilledSample> {
    if !passed && !override_filter {
        return Vec::new();
    }
    let steps: Vec<EvidenceStep> = chain.steps.iter().map(EvidenceStep::from).collect();
    modes
        .iter()
        .map(|&mode| DistilledSample {
            sample_id: sample.sample_id.clone(),
            video_id: sample.video.id.clone(),
            duration_s: sample.video.duration_s,
            question: sample.question.clone(),
            options: sample.options.clone(),
            answer_idx: sample.answer_idx,
            target_mode: mode,
            evidence_steps: steps.clone(),
            cot_text: cot_text.to_string(),
            extra: Default::default(),
        })
        .collect()
}

/// Record-level invariants: at least one cited span, all inside the video.
pub fn validate_distilled(rec: &DistilledSample) -> Vec<String> {
    let mut v = Vec::new();
    let spans = parse_spans(&rec.cot_text, Some(rec.duration_s));
    if rec.target_mode.needs_evidence() && spans.is_empty() {
        v.push("cot_text cites no span".to_string());
    }
    if spans
        .iter()
        .any(|s| s.start < 0.0 || s.end > rec.duration_s + SPAN_SLACK_S)
    {
        v.push("cot_text cites a span outside the video".to_string());
    }
    if rec.answer_idx >= rec.options.len() {
        v.push("answer_idx out of range".to_string());
    }
    v
}

/// Hops per distinct sample (the first record of each sample counts).
pub fn hop_histogram(records: &[DistilledSample]) -> BTreeMap<usize, usize> {
    let mut seen = HashSet::new();
    let mut hist = BTreeMap::new();
    for r in records {
        if seen.insert(r.sample_id.as_str()) {
            *hist.entry(r.hops()).or_insert(0) += 1;
        }
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{evidence_marker, MockScorer, MockWorld};
    use crate::types::{EvidenceSegment, VideoRef};
    use crate::Span;

    fn sample() -> QaSample {
        QaSample {
            sample_id: "d".into(),
            video: VideoRef {
                id: "v".into(),
                duration_s: 20.0,
                uri: String::new(),
            },
            question: "What does the man do?".into(),
            options: ["sit", "run", "jump", "wave", "eat"]
                .map(String::from)
                .to_vec(),
            answer_idx: 1,
            gt_window: None,
        }
    }

    fn world() -> MockWorld {
        let mut w = MockWorld::new(0.2, 0);
        w.insert("d", 1, &["d/L1/2", "d/L2/5"]);
        w
    }

    fn step(id: &str, a: f64, b: f64, text: &str) -> EvidenceSegment {
        EvidenceSegment {
            seg_id: id.into(),
            span: Span { start: a, end: b },
            level: 1,
            text: text.into(),
        }
    }

    fn chain(relevant: bool) -> EvidenceChain {
        let tag = |id: &str| {
            if relevant {
                evidence_marker(id)
            } else {
                String::new()
            }
        };
        EvidenceChain::new(
            vec![
                step(
                    "d/L1/2",
                    2.5,
                    3.75,
                    &format!("a man runs {}", tag("d/L1/2")),
                ),
                step(
                    "d/L2/5",
                    6.25,
                    8.75,
                    &format!("he keeps running {}", tag("d/L2/5")),
                ),
            ],
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn canned_summary_is_parsed() {
        let reply = r#"{"full_chain_of_thought": "The man appears from [3.1-7.7seconds] running.", "final_answer": "C"}"#;
        let m = MockScorer::new(world()).with_canned(Purpose::Summarization, vec![reply.into()]);
        let s = summarize_chain(&chain(true), &sample(), &m, 3).unwrap();
        assert_eq!(s.predicted_answer_idx, 2);
        assert!(s.cot_text.contains("[3.1-7.7seconds]"));
    }

    #[test]
    fn missing_final_answer() {
        let reply = r#"{"full_chain_of_thought": "[1.0-2.0seconds] x"}"#;
        let m = MockScorer::new(world()).with_canned(Purpose::Summarization, vec![reply.into()]);
        assert!(matches!(
            summarize_chain(&chain(true), &sample(), &m, 2),
            Err(DistillError::UnparseableSummary { attempts: 2, .. })
        ));
    }

    #[test]
    fn spanless_summary() {
        let reply = r#"```json
{"full_chain_of_thought": "He runs.", "final_answer": "B"}
```"#;
        let m = MockScorer::new(world()).with_canned(Purpose::Summarization, vec![reply.into()]);
        assert!(matches!(
            summarize_chain(&chain(true), &sample(), &m, 1),
            Err(DistillError::SpanlessSummary { .. })
        ));
    }

    #[test]
    fn retry_recovers() {
        let good = r#"{"full_chain_of_thought": "from 2.5 to 3.75 seconds he runs", "final_answer": "run"}"#;
        let m = MockScorer::new(world())
            .with_canned(Purpose::Summarization, vec!["garbage".into(), good.into()]);
        let s = summarize_chain(&chain(true), &sample(), &m, 3).unwrap();
        assert_eq!(s.predicted_answer_idx, 1);
    }

    #[test]
    fn out_of_range_span() {
        let reply = r#"{"full_chain_of_thought": "[15.0-25.0seconds]", "final_answer": "B"}"#;
        let m = MockScorer::new(world()).with_canned(Purpose::Summarization, vec![reply.into()]);
        assert!(matches!(
            summarize_chain(&chain(true), &sample(), &m, 1),
            Err(DistillError::SpanOutOfRange { .. })
        ));
    }

    #[test]
    fn mock_summary_keeps_spans_and_answers() {
        let m = MockScorer::new(world());
        let s = summarize_chain(&chain(true), &sample(), &m, 1).unwrap();
        assert_eq!(s.predicted_answer_idx, 1);
        assert_eq!(parse_spans(&s.cot_text, Some(20.0)).len(), 2);
        assert!(filter_chain(&s.cot_text, &sample(), &m).unwrap().pass);
    }

    #[test]
    fn filter_verdicts() {
        let d = OptionDistribution::new(vec![0.1, 0.7, 0.1, 0.05, 0.05]).unwrap();
        assert!(verdict_for(d, 1).pass);
        assert!(!verdict_for(OptionDistribution::uniform(5), 0).pass);
        let m = MockScorer::new(world());
        let ctx = prompts::chain_context(&chain(true));
        assert!(filter_chain(&ctx, &sample(), &m).unwrap().pass);
        let ctx = prompts::chain_context(&chain(false));
        assert!(!filter_chain(&ctx, &sample(), &m).unwrap().pass);
    }

    #[test]
    fn emission_modes() {
        let all: BTreeSet<TargetMode> = TargetMode::ALL.into_iter().collect();
        let recs = emit_training_samples(
            &sample(),
            &chain(true),
            "[1.0-2.0seconds] x",
            &all,
            true,
            false,
        );
        assert_eq!(recs.len(), 3);
        let modes: Vec<_> = recs.iter().map(|r| r.target_mode).collect();
        assert_eq!(
            modes,
            vec![TargetMode::Qa, TargetMode::Qea, TargetMode::Qae]
        );
        assert!(recs.iter().all(|r| r.sample_id == "d"));

        let qa: BTreeSet<TargetMode> = [TargetMode::Qa].into_iter().collect();
        let recs = emit_training_samples(
            &sample(),
            &chain(true),
            "[1.0-2.0seconds] x",
            &qa,
            true,
            false,
        );
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].cot_text, "[1.0-2.0seconds] x");
        assert!(!recs[0].target_text().contains("seconds"));

        assert!(emit_training_samples(&sample(), &chain(true), "x", &all, false, false).is_empty());
        assert_eq!(
            emit_training_samples(&sample(), &chain(true), "x", &all, false, true).len(),
            3
        );
    }

    #[test]
    fn histogram() {
        let all: BTreeSet<TargetMode> = [TargetMode::Qa].into_iter().collect();
        let mut recs = Vec::new();
        for (id, hops) in [("a", 1usize), ("b", 2), ("c", 2)] {
            let mut s = sample();
            s.sample_id = id.into();
            let steps: Vec<_> = (0..hops)
                .map(|i| step(&format!("{id}/{i}"), i as f64, i as f64 + 1.0, "t"))
                .collect();
            let c = EvidenceChain::new(steps, 1.0).unwrap();
            recs.extend(emit_training_samples(
                &s,
                &c,
                "[0.0-1.0seconds]",
                &all,
                true,
                false,
            ));
        }
        assert_eq!(hop_histogram(&recs), BTreeMap::from([(1, 1), (2, 2)]));
        assert!(hop_histogram(&[]).is_empty());
    }
}
