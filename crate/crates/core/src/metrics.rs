//! Temporal span grammar and grounded-QA metrics.
//!
//! Two span spellings are recognized in model text:
//!
//! * bracketed: `[3.1-7.7seconds]` or `[3.1-7.7 seconds]`
//! * prose: `from 5.581 to 16.924 seconds`
//!
//! Numbers are plain decimals. When a duration is supplied and every number
//! in the text is at most 1.0, the values are read as fractions of the
//! duration and scaled to seconds.

use crate::scalar::Scalar;
use crate::span::Span;
use crate::types::{match_option, QaSample};
use crate::TimeSpan;
use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;

static SPAN_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(
        r"\[(\d+(?:\.\d+)?)-(\d+(?:\.\d+)?) ?seconds\]|from (\d+(?:\.\d+)?) to (\d+(?:\.\d+)?) seconds",
    )
    .expect("span regex")
});

/// Raw `(start, end)` numbers in text order, before normalization.
fn raw_pairs(text: &str) -> Vec<(f64, f64)> {
    SPAN_RE
        .captures_iter(text)
        .filter_map(|c| {
            let (a, b) = match (c.get(1), c.get(2)) {
                (Some(a), Some(b)) => (a, b),
                _ => (c.get(3)?, c.get(4)?),
            };
            Some((a.as_str().parse().ok()?, b.as_str().parse().ok()?))
        })
        .collect()
}

/// Extracts every time span mentioned in `text`, in order of appearance.
pub fn parse_spans(text: &str, duration_s: Option<f64>) -> Vec<TimeSpan> {
    let pairs = raw_pairs(text);
    let factor = match duration_s {
        Some(d) if pairs.iter().all(|&(a, b)| a <= 1.0 && b <= 1.0) => d,
        _ => 1.0,
    };
    pairs
        .into_iter()
        .filter(|&(a, b)| a < b)
        .map(|(a, b)| Span {
            start: a * factor,
            end: b * factor,
        })
        .collect()
}

/// Shortest round-trip decimal with at least one fractional digit.
pub fn format_seconds(x: f64) -> String {
    let s = format!("{x}");
    if s.contains('.') || s.contains('e') || !x.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

/// Rounded to milliseconds, trailing zeros trimmed: `0.0625 -> "0.062"`.
pub fn format_millis(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0');
    if s.ends_with('.') {
        format!("{s}0")
    } else {
        s.to_string()
    }
}

/// Canonical bracketed form, lossless: `[1.5-3.0seconds]`.
pub fn format_span(span: &TimeSpan) -> String {
    format!(
        "[{}-{}seconds]",
        format_seconds(span.start),
        format_seconds(span.end)
    )
}

/// Bracketed form rounded to milliseconds, as written into prompts.
pub fn format_span_millis(span: &TimeSpan) -> String {
    format!(
        "[{}-{}seconds]",
        format_millis(span.start),
        format_millis(span.end)
    )
}

/// Intersection over the predicted span's length.
pub fn iop<T: Scalar>(pred: &Span<T>, gt: &Span<T>) -> T {
    let len = pred.length();
    if len <= T::zero() {
        return T::zero();
    }
    pred.intersection(gt) / len
}

/// Intersection over the covered length of both spans.
pub fn iou<T: Scalar>(pred: &Span<T>, gt: &Span<T>) -> T {
    let union = pred.union_length(gt);
    if union <= T::zero() {
        return T::zero();
    }
    pred.intersection(gt) / union
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    /// Span of the highest-scoring step, or the longest without scores.
    BestStep,
    /// `[min start, max end]` over all spans.
    #[default]
    Hull,
    /// First span in text order.
    First,
}

impl std::str::FromStr for WindowPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "best_step" | "best-step" => Ok(Self::BestStep),
            "hull" => Ok(Self::Hull),
            "first" => Ok(Self::First),
            other => Err(format!("unknown window policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("cannot derive a window from an empty chain")]
    EmptyChain,
    #[error("prediction for {0} has no gold sample with a ground-truth window")]
    UnmatchedSample(String),
    #[error("prediction for {sample_id}: {reason}")]
    BadPrediction { sample_id: String, reason: String },
}

/// Collapses a multi-step chain to a single predicted window.
pub fn chain_to_window(
    spans: &[TimeSpan],
    scores: Option<&[f64]>,
    policy: WindowPolicy,
) -> Result<TimeSpan, MetricsError> {
    let first = *spans.first().ok_or(MetricsError::EmptyChain)?;
    Ok(match policy {
        WindowPolicy::First => first,
        WindowPolicy::Hull => spans.iter().skip(1).fold(first, |acc, s| acc.hull(s)),
        WindowPolicy::BestStep => {
            let key: Vec<f64> = match scores {
                Some(sc) if sc.len() == spans.len() => sc.to_vec(),
                _ => spans.iter().map(|s| s.length()).collect(),
            };
            let mut best = 0;
            for (i, &k) in key.iter().enumerate() {
                if k > key[best] {
                    best = i;
                }
            }
            spans[best]
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedPrediction {
    pub sample_id: String,
    pub predicted_answer_idx: Option<usize>,
    pub predicted_window: Option<TimeSpan>,
    #[serde(default)]
    pub source: String,
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_idx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    #[serde(default)]
    pub raw_text: String,
}

impl GroundedPrediction {
    /// Resolves the answer and reads the window out of the raw model text.
    pub fn from_record(
        record: &PredictionRecord,
        gold: &QaSample,
        policy: WindowPolicy,
    ) -> Result<Self, MetricsError> {
        let predicted_answer_idx = match (record.answer_idx, &record.answer_text) {
            (Some(i), _) => Some(i),
            (None, Some(text)) => match_option(text, &gold.options),
            (None, None) => None,
        };
        let spans = parse_spans(&record.raw_text, Some(gold.video.duration_s));
        let predicted_window = if spans.is_empty() {
            None
        } else {
            Some(chain_to_window(&spans, None, policy)?)
        };
        if let Some(w) = &predicted_window {
            if w.start < 0.0 || w.end <= w.start {
                return Err(MetricsError::BadPrediction {
                    sample_id: record.sample_id.clone(),
                    reason: format!("invalid window {w}"),
                });
            }
        }
        Ok(Self {
            sample_id: record.sample_id.clone(),
            predicted_answer_idx,
            predicted_window,
            source: record.raw_text.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GqaRow {
    pub sample_id: String,
    pub correct: bool,
    pub has_window: bool,
    pub iop: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GqaReport {
    pub count: usize,
    pub acc: f64,
    pub iop_at_05: f64,
    pub miop: f64,
    pub iou_at_05: f64,
    pub miou: f64,
    pub acc_gqa: f64,
    pub rows: Vec<GqaRow>,
}

pub const GROUNDING_THRESHOLD: f64 = 0.5;

/// Scores predictions against gold samples. The denominator is the number
/// of predictions; predictions without a window count as zero overlap.
pub fn evaluate_gqa(
    predictions: &[GroundedPrediction],
    gold: &[QaSample],
) -> Result<GqaReport, MetricsError> {
    let by_id: HashMap<&str, &QaSample> = gold.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut rows = Vec::with_capacity(predictions.len());
    for p in predictions {
        let g = by_id
            .get(p.sample_id.as_str())
            .copied()
            .ok_or_else(|| MetricsError::UnmatchedSample(p.sample_id.clone()))?;
        let gt = g
            .gt_window
            .ok_or_else(|| MetricsError::UnmatchedSample(p.sample_id.clone()))?;
        let (iop_v, iou_v) = match &p.predicted_window {
            Some(w) => (iop(w, &gt), iou(w, &gt)),
            None => (0.0, 0.0),
        };
        rows.push(GqaRow {
            sample_id: p.sample_id.clone(),
            correct: p.predicted_answer_idx == Some(g.answer_idx),
            has_window: p.predicted_window.is_some(),
            iop: iop_v,
            iou: iou_v,
        });
    }
    let n = rows.len();
    let frac = |pred: &dyn Fn(&GqaRow) -> bool| {
        if n == 0 {
            0.0
        } else {
            rows.iter().filter(|r| pred(r)).count() as f64 / n as f64
        }
    };
    let mean = |f: &dyn Fn(&GqaRow) -> f64| {
        if n == 0 {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(GqaReport {
        count: n,
        acc: frac(&|r| r.correct),
        iop_at_05: frac(&|r| r.iop >= GROUNDING_THRESHOLD),
        miop: mean(&|r| r.iop),
        iou_at_05: frac(&|r| r.iou >= GROUNDING_THRESHOLD),
        miou: mean(&|r| r.iou),
        acc_gqa: frac(&|r| r.correct && r.iop >= GROUNDING_THRESHOLD),
        rows,
    })
}

impl GqaReport {
    /// Aligned plain-text table: per-sample rows then the summary.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.sample_id.len())
            .max()
            .unwrap_or(0)
            .max("sample_id".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>6}  {:>6}  {:>6}",
            "sample_id", "correct", "window", "IoP", "IoU"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>6}  {:>6.3}  {:>6.3}",
                r.sample_id,
                if r.correct { "yes" } else { "no" },
                if r.has_window { "yes" } else { "no" },
                r.iop,
                r.iou
            );
        }
        let _ = writeln!(out);
        for (name, value) in [
            ("Acc", self.acc),
            ("IoP@0.5", self.iop_at_05),
            ("mIoP", self.miop),
            ("IoU@0.5", self.iou_at_05),
            ("mIoU", self.miou),
            ("Acc@GQA", self.acc_gqa),
        ] {
            let _ = writeln!(out, "{name:<8} {:>6.2}", value * 100.0);
        }
        let _ = writeln!(out, "{:<8} {:>6}", "N", self.count);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::VideoRef;

    fn sp(a: f64, b: f64) -> TimeSpan {
        Span { start: a, end: b }
    }

    #[test]
    fn table_a1_normalized_form() {
        let spans = parse_spans("0. [0.0-0.062seconds] There are no people", Some(32.0));
        assert_eq!(spans, vec![sp(0.0, 1.984)]);
    }

    #[test]
    fn prose_form() {
        let spans = parse_spans(
            "In the interval from 5.581 to 16.924 seconds in the video",
            None,
        );
        assert_eq!(spans, vec![sp(5.581, 16.924)]);
    }

    #[test]
    fn no_spans() {
        assert!(parse_spans("no spans here", Some(10.0)).is_empty());
    }

    #[test]
    fn space_before_seconds_and_mixed_forms_in_order() {
        let text = "from 9.0 to 11.5 seconds then [0.0-4.621 seconds] and [2-3seconds]";
        assert_eq!(
            parse_spans(text, Some(40.0)),
            vec![sp(9.0, 11.5), sp(0.0, 4.621), sp(2.0, 3.0)]
        );
    }

    #[test]
    fn reversed_spans_are_dropped_and_absolute_values_kept() {
        let text = "[5.0-2.0seconds] [0.5-3.0seconds]";
        assert_eq!(parse_spans(text, Some(10.0)), vec![sp(0.5, 3.0)]);
    }

    #[test]
    fn grammar_is_strict() {
        assert!(parse_spans("[1.0 - 2.0 seconds]", None).is_empty());
        assert!(parse_spans("[1.0-2.0]", None).is_empty());
        assert!(parse_spans("from 1 to 2 secs", None).is_empty());
        assert!(parse_spans("[.5-1.0seconds]", None).is_empty());
    }

    #[test]
    fn formatting() {
        assert_eq!(format_millis(0.0625), "0.062");
        assert_eq!(format_millis(0.9375), "0.938");
        assert_eq!(format_millis(1.0), "1.0");
        assert_eq!(format_millis(0.25), "0.25");
        assert_eq!(
            format_span(&sp(2.0, 1.0 / 3.0 + 2.0)),
            "[2.0-2.3333333333333335seconds]"
        );
        assert_eq!(format_span_millis(&sp(0.0, 11.2519)), "[0.0-11.252seconds]");
    }

    #[test]
    fn worked_overlap_example() {
        let (p, g) = (sp(2.0, 6.0), sp(4.0, 8.0));
        assert_eq!(iop(&p, &g), 0.5);
        assert!((iou(&p, &g) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iop(&p, &p), 1.0);
        assert_eq!(iou(&p, &p), 1.0);
        assert_eq!(iop(&p, &sp(7.0, 9.0)), 0.0);
        assert_eq!(iou(&p, &sp(7.0, 9.0)), 0.0);
    }

    #[test]
    fn exact_rational_metrics() {
        use crate::scalar::Rational;
        let r = |a: i64, b: i64| Span {
            start: Rational::from_integer(a),
            end: Rational::from_integer(b),
        };
        assert_eq!(iou(&r(2, 6), &r(4, 8)), Rational::new(1, 3));
        assert_eq!(iop(&r(2, 6), &r(4, 8)), Rational::new(1, 2));
    }

    #[test]
    fn window_policies() {
        let spans = [sp(1.0, 3.0), sp(8.0, 10.0)];
        assert_eq!(
            chain_to_window(&spans, None, WindowPolicy::Hull).unwrap(),
            sp(1.0, 10.0)
        );
        assert_eq!(
            chain_to_window(&spans, None, WindowPolicy::First).unwrap(),
            sp(1.0, 3.0)
        );
        assert_eq!(
            chain_to_window(&spans, Some(&[0.4, 0.9]), WindowPolicy::BestStep).unwrap(),
            sp(8.0, 10.0)
        );
        let uneven = [sp(1.0, 2.0), sp(3.0, 7.0)];
        assert_eq!(
            chain_to_window(&uneven, None, WindowPolicy::BestStep).unwrap(),
            sp(3.0, 7.0)
        );
        for policy in [
            WindowPolicy::Hull,
            WindowPolicy::First,
            WindowPolicy::BestStep,
        ] {
            assert_eq!(
                chain_to_window(&spans[..1], None, policy).unwrap(),
                sp(1.0, 3.0)
            );
        }
        assert_eq!(
            chain_to_window(&[], None, WindowPolicy::Hull),
            Err(MetricsError::EmptyChain)
        );
    }

    fn gold(id: &str, answer: usize, window: TimeSpan) -> QaSample {
        QaSample {
            sample_id: id.into(),
            video: VideoRef {
                id: format!("v-{id}"),
                duration_s: 20.0,
                uri: String::new(),
            },
            question: "q".into(),
            options: vec!["a".into(), "b".into(), "c".into()],
            answer_idx: answer,
            gt_window: Some(window),
        }
    }

    fn pred(id: &str, answer: usize, window: Option<TimeSpan>) -> GroundedPrediction {
        GroundedPrediction {
            sample_id: id.into(),
            predicted_answer_idx: Some(answer),
            predicted_window: window,
            source: String::new(),
        }
    }

    #[test]
    fn two_sample_report() {
        // iop 0.6 and 0.3, both answered correctly.
        let g = vec![gold("a", 0, sp(0.0, 6.0)), gold("b", 1, sp(0.0, 3.0))];
        let p = vec![
            pred("a", 0, Some(sp(0.0, 10.0))),
            pred("b", 1, Some(sp(0.0, 10.0))),
        ];
        let r = evaluate_gqa(&p, &g).unwrap();
        assert_eq!(r.rows[0].iop, 0.6);
        assert!((r.rows[1].iop - 0.3).abs() < 1e-12);
        assert_eq!(r.acc_gqa, 0.5);
        assert_eq!(r.iop_at_05, 0.5);
        assert_eq!(r.acc, 1.0);
    }

    #[test]
    fn windowless_predictions_score_zero() {
        let g = vec![gold("a", 0, sp(0.0, 6.0)), gold("b", 1, sp(0.0, 3.0))];
        let p = vec![pred("a", 0, None), pred("b", 1, None)];
        let r = evaluate_gqa(&p, &g).unwrap();
        assert_eq!((r.acc_gqa, r.miop, r.miou), (0.0, 0.0, 0.0));
        assert_eq!(r.acc, 1.0);
    }

    #[test]
    fn identity_predictions() {
        let g = vec![gold("a", 0, sp(1.0, 6.0)), gold("b", 2, sp(0.5, 3.0))];
        let p: Vec<_> = g
            .iter()
            .map(|s| pred(&s.sample_id, s.answer_idx, s.gt_window))
            .collect();
        let r = evaluate_gqa(&p, &g).unwrap();
        assert_eq!((r.acc_gqa, r.miop, r.miou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn unmatched_prediction() {
        let g = vec![gold("a", 0, sp(0.0, 6.0))];
        assert_eq!(
            evaluate_gqa(&[pred("zzz", 0, None)], &g),
            Err(MetricsError::UnmatchedSample("zzz".into()))
        );
        let mut no_window = gold("a", 0, sp(0.0, 6.0));
        no_window.gt_window = None;
        assert!(evaluate_gqa(&[pred("a", 0, None)], &[no_window]).is_err());
    }

    #[test]
    fn record_conversion() {
        let g = gold("a", 1, sp(0.0, 6.0));
        let rec = PredictionRecord {
            sample_id: "a".into(),
            answer_idx: None,
            answer_text: Some("B".into()),
            raw_text: "from 1.0 to 2.0 seconds and [4.0-5.0seconds]".into(),
        };
        let p = GroundedPrediction::from_record(&rec, &g, WindowPolicy::Hull).unwrap();
        assert_eq!(p.predicted_answer_idx, Some(1));
        assert_eq!(p.predicted_window, Some(sp(1.0, 5.0)));
        let rec = PredictionRecord {
            raw_text: "nothing".into(),
            ..rec
        };
        let p = GroundedPrediction::from_record(&rec, &g, WindowPolicy::Hull).unwrap();
        assert_eq!(p.predicted_window, None);
    }

    #[test]
    fn table_renders() {
        let g = vec![gold("a", 0, sp(0.0, 6.0))];
        let r = evaluate_gqa(&[pred("a", 0, Some(sp(0.0, 6.0)))], &g).unwrap();
        let t = r.to_table();
        assert!(t.contains("Acc@GQA  100.00"));
        assert!(t.lines().next().unwrap().starts_with("sample_id"));
    }
}
