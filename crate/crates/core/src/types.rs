//! Domain records shared by every pipeline stage.

use crate::TimeSpan;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 5;
pub const OPTION_LETTERS: [char; MAX_OPTIONS] = ['A', 'B', 'C', 'D', 'E'];

/// Tolerance on probability vectors summing to one.
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRef {
    pub id: String,
    pub duration_s: f64,
    #[serde(default)]
    pub uri: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub sample_id: String,
    pub video: VideoRef,
    pub question: String,
    pub options: Vec<String>,
    pub answer_idx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_window: Option<TimeSpan>,
}

impl QaSample {
    pub fn answer_letter(&self) -> char {
        OPTION_LETTERS[self.answer_idx.min(MAX_OPTIONS - 1)]
    }

    /// "A. text B. text ..." as used inside prompts.
    pub fn options_line(&self) -> String {
        self.options
            .iter()
            .zip(OPTION_LETTERS)
            .map(|(opt, letter)| format!("{letter}. {opt}."))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Maps a free-form answer to an option index: an option letter ("C", "(C)",
/// "C.", "C. text"), the exact option text, or a unique case-insensitive
/// prefix of one option.
pub fn match_option(answer: &str, options: &[String]) -> Option<usize> {
    let trimmed = answer.trim().trim_end_matches('.').trim();
    if trimmed.is_empty() {
        return None;
    }
    if let Some(i) = options.iter().position(|o| o == trimmed) {
        return Some(i);
    }
    let inner = trimmed
        .trim_start_matches('(')
        .trim_start_matches("Answer:")
        .trim_start_matches("answer:")
        .trim()
        .trim_start_matches('(');
    let mut chars = inner.chars();
    if let Some(first) = chars.next() {
        let rest = chars.as_str();
        let delimited = rest.is_empty()
            || rest.starts_with(')')
            || rest.starts_with('.')
            || rest.starts_with(':')
            || rest.starts_with(' ');
        if first.is_ascii_uppercase() && delimited {
            if let Some(i) = OPTION_LETTERS.iter().position(|&l| l == first) {
                if i < options.len() {
                    return Some(i);
                }
            }
        }
    }
    let lower = trimmed.to_lowercase();
    let hits: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| o.to_lowercase().starts_with(&lower))
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [only] => Some(*only),
        _ => None,
    }
}

/// Checks every [`QaSample`] invariant; an empty list means the sample is valid.
pub fn validate_sample(sample: &QaSample) -> Vec<String> {
    let mut violations = Vec::new();
    if sample.sample_id.trim().is_empty() {
        violations.push("sample_id must be non-empty".to_string());
    }
    if sample.video.id.trim().is_empty() {
        violations.push("video.id must be non-empty".to_string());
    }
    let duration_ok = sample.video.duration_s.is_finite() && sample.video.duration_s > 0.0;
    if !duration_ok {
        violations.push("duration_s must be > 0".to_string());
    }
    let n = sample.options.len();
    if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
        violations.push(format!(
            "options must have {MIN_OPTIONS}-{MAX_OPTIONS} entries, got {n}"
        ));
    }
    if sample.answer_idx >= n {
        violations.push("answer_idx out of range".to_string());
    }
    if sample.options.iter().any(|o| o.trim().is_empty()) {
        violations.push("options must be non-empty strings".to_string());
    }
    let mut seen = HashSet::new();
    if !sample.options.iter().all(|o| seen.insert(o.as_str())) {
        violations.push("options must be pairwise distinct".to_string());
    }
    if let Some(window) = &sample.gt_window {
        let check = if duration_ok {
            window.check(sample.video.duration_s)
        } else {
            crate::Span::new(window.start, window.end).map(|_| ())
        };
        if let Err(e) = check {
            violations.push(format!("gt_window invalid: {e}"));
        }
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSegment {
    pub seg_id: String,
    #[serde(flatten)]
    pub span: TimeSpan,
    pub level: u32,
    #[serde(default)]
    pub text: String,
}

impl EvidenceSegment {
    pub fn make_id(sample_id: &str, level: u32, index: usize) -> String {
        format!("{sample_id}/L{level}/{index}")
    }

    /// Canonical chain order: start, then end, then id.
    pub fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.span
            .start
            .total_cmp(&other.span.start)
            .then(self.span.end.total_cmp(&other.span.end))
            .then_with(|| self.seg_id.cmp(&other.seg_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePool {
    pub sample_id: String,
    pub segments: Vec<EvidenceSegment>,
    pub refined: bool,
    /// Segments dropped because captioning failed.
    #[serde(default)]
    pub dropped: usize,
}

impl EvidencePool {
    pub fn get(&self, seg_id: &str) -> Option<&EvidenceSegment> {
        self.segments.iter().find(|s| s.seg_id == seg_id)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChainError {
    #[error("chain must contain at least one step")]
    Empty,
    #[error("duplicate segment {0} in chain")]
    Duplicate(String),
    #[error("chain has {len} steps, more than max_hops {max}")]
    TooLong { len: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceChain {
    pub steps: Vec<EvidenceSegment>,
    pub score: f64,
    #[serde(default)]
    pub frozen: bool,
}

impl EvidenceChain {
    /// Sorts steps canonically and rejects duplicates.
    pub fn new(mut steps: Vec<EvidenceSegment>, score: f64) -> Result<Self, ChainError> {
        if steps.is_empty() {
            return Err(ChainError::Empty);
        }
        steps.sort_by(|a, b| a.canonical_cmp(b));
        for pair in steps.windows(2) {
            if pair[0].seg_id == pair[1].seg_id {
                return Err(ChainError::Duplicate(pair[0].seg_id.clone()));
            }
        }
        let mut ids = HashSet::new();
        for s in &steps {
            if !ids.insert(s.seg_id.as_str()) {
                return Err(ChainError::Duplicate(s.seg_id.clone()));
            }
        }
        Ok(Self {
            steps,
            score,
            frozen: false,
        })
    }

    pub fn with_max_hops(self, max_hops: usize) -> Result<Self, ChainError> {
        if self.steps.len() > max_hops {
            return Err(ChainError::TooLong {
                len: self.steps.len(),
                max: max_hops,
            });
        }
        Ok(self)
    }

    pub fn hops(&self) -> usize {
        self.steps.len()
    }

    pub fn seg_ids(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.seg_id.as_str()).collect()
    }

    pub fn contains(&self, seg_id: &str) -> bool {
        self.steps.iter().any(|s| s.seg_id == seg_id)
    }

    pub fn spans(&self) -> Vec<TimeSpan> {
        self.steps.iter().map(|s| s.span).collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistributionError {
    #[error("distribution is empty")]
    Empty,
    #[error("probability {0} at index {1} outside [0, 1]")]
    OutOfRange(f64, usize),
    #[error("probabilities sum to {0}, not 1")]
    BadSum(f64),
}

/// Probability vector over answer options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionDistribution {
    pub probs: Vec<f64>,
}

impl OptionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        if probs.is_empty() {
            return Err(DistributionError::Empty);
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(DistributionError::OutOfRange(p, i));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(DistributionError::BadSum(sum));
        }
        Ok(Self { probs })
    }

    /// Softmax over log-scores; `-inf` entries receive zero mass.
    pub fn from_logits(logits: &[f64]) -> Result<Self, DistributionError> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if logits.is_empty() || !max.is_finite() {
            return Err(DistributionError::Empty);
        }
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self::new(exps.into_iter().map(|e| e / total).collect())
    }

    /// Empirical frequencies of sampled answers.
    pub fn from_counts(counts: &[usize]) -> Result<Self, DistributionError> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(DistributionError::Empty);
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, idx: usize) -> f64 {
        self.probs.get(idx).copied().unwrap_or(0.0)
    }

    /// Index of the unique maximum, or `None` when the maximum is shared.
    pub fn unique_argmax(&self) -> Option<usize> {
        let max = self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut winners = self
            .probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == max)
            .map(|(i, _)| i);
        let first = winners.next()?;
        match winners.next() {
            Some(_) => None,
            None => Some(first),
        }
    }
}

/// Which tokens a distilled record trains the model to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetMode {
    /// Question to answer only.
    #[serde(rename = "QA")]
    Qa,
    /// Question to evidence, then answer.
    #[serde(rename = "QEA")]
    Qea,
    /// Question to answer, then evidence.
    #[serde(rename = "QAE")]
    Qae,
}

impl TargetMode {
    pub const ALL: [TargetMode; 3] = [TargetMode::Qa, TargetMode::Qea, TargetMode::Qae];

    pub fn as_str(&self) -> &'static str {
        match self {
            TargetMode::Qa => "QA",
            TargetMode::Qea => "QEA",
            TargetMode::Qae => "QAE",
        }
    }

    pub fn needs_evidence(&self) -> bool {
        !matches!(self, TargetMode::Qa)
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TargetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "QA" => Ok(TargetMode::Qa),
            "QEA" => Ok(TargetMode::Qea),
            "QAE" => Ok(TargetMode::Qae),
            other => Err(format!("unknown target mode {other:?}")),
        }
    }
}

/// One step of a persisted chain, without the id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceStep {
    pub t_s: f64,
    pub t_e: f64,
    pub level: u32,
    pub text: String,
}

impl From<&EvidenceSegment> for EvidenceStep {
    fn from(seg: &EvidenceSegment) -> Self {
        Self {
            t_s: seg.span.start,
            t_e: seg.span.end,
            level: seg.level,
            text: seg.text.clone(),
        }
    }
}

/// One training record. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledSample {
    pub sample_id: String,
    pub video_id: String,
    pub duration_s: f64,
    pub question: String,
    pub options: Vec<String>,
    pub answer_idx: usize,
    pub target_mode: TargetMode,
    pub evidence_steps: Vec<EvidenceStep>,
    pub cot_text: String,
    /// Fields written by other tools, kept verbatim on rewrite.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl DistilledSample {
    pub fn hops(&self) -> usize {
        self.evidence_steps.len()
    }

    pub fn answer_text(&self) -> String {
        let letter = OPTION_LETTERS[self.answer_idx.min(MAX_OPTIONS - 1)];
        let option = self
            .options
            .get(self.answer_idx)
            .map(String::as_str)
            .unwrap_or("");
        format!("Answer: ({letter}) {option}")
    }

    /// The text the model is trained to generate for this record's mode.
    pub fn target_text(&self) -> String {
        match self.target_mode {
            TargetMode::Qa => self.answer_text(),
            TargetMode::Qea => format!("{}\n{}", self.cot_text, self.answer_text()),
            TargetMode::Qae => format!("{}\n{}", self.answer_text(), self.cot_text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Span;

    pub(crate) fn sample() -> QaSample {
        QaSample {
            sample_id: "s1".into(),
            video: VideoRef {
                id: "v1".into(),
                duration_s: 32.0,
                uri: "videos/v1.mp4".into(),
            },
            question: "What happens?".into(),
            options: vec!["a".into(), "b".into(), "c".into(), "d".into(), "e".into()],
            answer_idx: 2,
            gt_window: None,
        }
    }

    fn seg(id: &str, s: f64, e: f64) -> EvidenceSegment {
        EvidenceSegment {
            seg_id: id.into(),
            span: Span::new(s, e).unwrap(),
            level: 1,
            text: String::new(),
        }
    }

    #[test]
    fn well_formed_sample_has_no_violations() {
        assert!(validate_sample(&sample()).is_empty());
    }

    #[test]
    fn answer_out_of_range() {
        let mut s = sample();
        s.answer_idx = 7;
        assert_eq!(validate_sample(&s), vec!["answer_idx out of range"]);
    }

    #[test]
    fn zero_duration() {
        let mut s = sample();
        s.video.duration_s = 0.0;
        assert_eq!(validate_sample(&s), vec!["duration_s must be > 0"]);
    }

    #[test]
    fn duplicate_and_empty_options() {
        let mut s = sample();
        s.options[1] = "a".into();
        s.options[3] = " ".into();
        let v = validate_sample(&s);
        assert!(v.iter().any(|m| m.contains("distinct")));
        assert!(v.iter().any(|m| m.contains("non-empty strings")));
    }

    #[test]
    fn gt_window_past_duration() {
        let mut s = sample();
        s.gt_window = Some(Span {
            start: 1.0,
            end: 40.0,
        });
        assert_eq!(validate_sample(&s).len(), 1);
    }

    #[test]
    fn chain_sorts_and_rejects_duplicates() {
        let c = EvidenceChain::new(vec![seg("b", 5.0, 6.0), seg("a", 1.0, 2.0)], 0.5).unwrap();
        assert_eq!(c.seg_ids(), vec!["a", "b"]);
        assert_eq!(
            EvidenceChain::new(vec![seg("a", 1.0, 2.0), seg("a", 1.0, 2.0)], 0.5),
            Err(ChainError::Duplicate("a".into()))
        );
        assert_eq!(EvidenceChain::new(vec![], 0.0), Err(ChainError::Empty));
        assert!(c.with_max_hops(1).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(OptionDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(OptionDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(OptionDistribution::new(vec![1.5, -0.5]).is_err());
        let d = OptionDistribution::from_logits(&[0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(d.probs, vec![0.5, 0.0, 0.5]);
        assert_eq!(d.unique_argmax(), None);
        let d = OptionDistribution::from_counts(&[1, 3, 1]).unwrap();
        assert_eq!(d.unique_argmax(), Some(1));
    }

    #[test]
    fn option_matching() {
        let opts: Vec<String> = ["guide", "performing", "watching them", "play for fun"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(match_option("C", &opts), Some(2));
        assert_eq!(match_option("(B)", &opts), Some(1));
        assert_eq!(match_option("D. play for fun", &opts), Some(3));
        assert_eq!(match_option("watching them", &opts), Some(2));
        assert_eq!(match_option("Perf", &opts), Some(1));
        assert_eq!(match_option("p", &opts), None);
        assert_eq!(match_option("E", &opts), None);
        assert_eq!(match_option("", &opts), None);
    }

    #[test]
    fn target_texts() {
        let rec = DistilledSample {
            sample_id: "s".into(),
            video_id: "v".into(),
            duration_s: 10.0,
            question: "q".into(),
            options: vec!["x".into(), "y".into()],
            answer_idx: 1,
            target_mode: TargetMode::Qea,
            evidence_steps: vec![],
            cot_text: "From [1.0-2.0seconds] ...".into(),
            extra: Default::default(),
        };
        assert_eq!(
            rec.target_text(),
            "From [1.0-2.0seconds] ...\nAnswer: (B) y"
        );
        let qa = DistilledSample {
            target_mode: TargetMode::Qa,
            ..rec.clone()
        };
        assert_eq!(qa.target_text(), "Answer: (B) y");
        let qae = DistilledSample {
            target_mode: TargetMode::Qae,
            ..rec
        };
        assert!(qae.target_text().starts_with("Answer: (B) y\n"));
    }
}
