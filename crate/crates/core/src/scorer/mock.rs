//! Deterministic stand-in for every model role.
//!
//! The world assigns each sample a hidden relevant set `R` of segment ids.
//! Narrations of relevant segments carry an [`evidence_marker`], and the
//! answer scorer reads coverage off the context text:
//!
//! `P(correct) = b + (1 - b) * |C ∩ R| / |R|`, the rest split evenly.
//!
//! Adding a relevant segment to a context never lowers `P(correct)` and adding
//! an irrelevant one never changes it, which is what makes search results
//! checkable against brute force.

use super::{Purpose, Scorer, ScorerError, ScorerRequest, Telemetry, TextRequest};
use crate::hashing::{digest_hex, stable_u64};
use crate::types::{OptionDistribution, OPTION_LETTERS};
use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSample {
    pub answer_idx: usize,
    pub relevant: BTreeSet<String>,
    /// Segments whose narration always fails.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub caption_failures: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockWorld {
    pub base_prob: f64,
    #[serde(default)]
    pub seed: u64,
    pub samples: BTreeMap<String, MockSample>,
}

impl MockWorld {
    pub fn new(base_prob: f64, seed: u64) -> Self {
        Self {
            base_prob,
            seed,
            samples: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, sample_id: &str, answer_idx: usize, relevant: &[&str]) {
        self.samples.insert(
            sample_id.to_string(),
            MockSample {
                answer_idx,
                relevant: relevant.iter().map(|s| s.to_string()).collect(),
                caption_failures: BTreeSet::new(),
                base_prob: None,
            },
        );
    }

    pub fn validate(&self) -> Result<(), String> {
        let check_b = |b: f64, who: &str| {
            if b > 0.0 && b < 1.0 {
                Ok(())
            } else {
                Err(format!("{who}: base_prob {b} must be in (0, 1)"))
            }
        };
        check_b(self.base_prob, "world")?;
        for (id, s) in &self.samples {
            if s.relevant.is_empty() {
                return Err(format!("{id}: relevant set must be non-empty"));
            }
            if let Some(b) = s.base_prob {
                check_b(b, id)?;
            }
        }
        Ok(())
    }

    /// Checks `b <= 1/|options|` for a sample whose option count is known.
    pub fn check_options(&self, sample_id: &str, n_options: usize) -> Result<(), String> {
        let b = self
            .samples
            .get(sample_id)
            .and_then(|s| s.base_prob)
            .unwrap_or(self.base_prob);
        if b * n_options as f64 > 1.0 + 1e-12 {
            return Err(format!("{sample_id}: base_prob {b} exceeds 1/{n_options}"));
        }
        Ok(())
    }

    pub fn coverage(&self, sample_id: &str, context: &str) -> f64 {
        match self.samples.get(sample_id) {
            Some(s) => {
                let hit = s
                    .relevant
                    .iter()
                    .filter(|r| context.contains(&evidence_marker(r)))
                    .count();
                hit as f64 / s.relevant.len() as f64
            }
            None => 0.0,
        }
    }

    /// The closed-form answer distribution for a context.
    pub fn distribution(
        &self,
        sample_id: &str,
        n_options: usize,
        context: &str,
    ) -> OptionDistribution {
        let Some(s) = self.samples.get(sample_id) else {
            return OptionDistribution::uniform(n_options);
        };
        let b = s.base_prob.unwrap_or(self.base_prob);
        let correct = b + (1.0 - b) * self.coverage(sample_id, context);
        let wrong = (1.0 - correct) / (n_options - 1) as f64;
        let probs = (0..n_options)
            .map(|i| if i == s.answer_idx { correct } else { wrong })
            .collect();
        OptionDistribution { probs }
    }
}

/// Tag embedded in narrations of relevant segments.
pub fn evidence_marker(seg_id: &str) -> String {
    format!("[ref:{seg_id}]")
}

static POOL_LINE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?m)^\d+\. \[(\d+(?:\.\d+)?)-(\d+(?:\.\d+)?)seconds\] (.*)$").expect("regex")
});
static CHAIN_LINE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"(?m)^\[(\d+(?:\.\d+)?)-(\d+(?:\.\d+)?)seconds\] (.*)$").expect("regex")
});
static STEP_LIMIT: Lazy<Regex> = Lazy::new(|| Regex::new(r"at most (\d+) steps").expect("regex"));

const SUBJECTS: [&str; 8] = [
    "a person in a red jacket",
    "two children",
    "a dog",
    "a woman holding a cup",
    "a man near the door",
    "a small group of people",
    "a cat on the sofa",
    "someone at a table",
];
const ACTIONS: [&str; 8] = [
    "walks across the room",
    "looks toward the camera",
    "picks up an object",
    "stands still",
    "talks to another person",
    "moves out of view",
    "sits down",
    "points at something",
];
const PLACES: [&str; 6] = [
    "in a backyard",
    "in a kitchen",
    "on a stage",
    "in a living room",
    "outdoors near some trees",
    "in a hallway",
];

pub struct MockScorer {
    world: MockWorld,
    canned: Mutex<HashMap<Purpose, (Vec<String>, usize)>>,
    telemetry: Telemetry,
}

impl MockScorer {
    pub fn new(world: MockWorld) -> Self {
        Self {
            world,
            canned: Mutex::new(HashMap::new()),
            telemetry: Telemetry::default(),
        }
    }

    pub fn world(&self) -> &MockWorld {
        &self.world
    }

    /// Queues fixed replies for a purpose; they are served in order and the
    /// last one repeats.
    pub fn with_canned(self, purpose: Purpose, replies: Vec<String>) -> Self {
        self.canned
            .lock()
            .expect("canned lock")
            .insert(purpose, (replies, 0));
        self
    }

    fn next_canned(&self, purpose: Purpose) -> Option<String> {
        let mut map = self.canned.lock().expect("canned lock");
        let (replies, cursor) = map.get_mut(&purpose)?;
        if replies.is_empty() {
            return None;
        }
        let reply = replies[(*cursor).min(replies.len() - 1)].clone();
        *cursor += 1;
        Some(reply)
    }

    fn pick<'a>(&self, list: &[&'a str], parts: &[&str]) -> &'a str {
        let seed = self.world.seed.to_string();
        let mut all = vec![seed.as_str()];
        all.extend_from_slice(parts);
        list[(stable_u64(&all) % list.len() as u64) as usize]
    }

    fn narrate(&self, req: &TextRequest) -> Result<String, ScorerError> {
        let seg_id = req.seg_id.as_deref().unwrap_or("");
        let sample = self.world.samples.get(&req.sample_id);
        if sample.is_some_and(|s| s.caption_failures.contains(seg_id)) {
            return Err(ScorerError::RemoteUnavailable {
                attempts: 1,
                detail: format!("mock narration failure for {seg_id}"),
                payload: String::new(),
            });
        }
        let mut text = format!(
            "Evidence: {} {} {}.",
            self.pick(&SUBJECTS, &[seg_id, "subject"]),
            self.pick(&ACTIONS, &[seg_id, "action"]),
            self.pick(&PLACES, &[&req.sample_id, "place"]),
        );
        if sample.is_some_and(|s| s.relevant.contains(seg_id)) {
            text.push_str(&format!(
                " This part shows a detail that bears on the question {}",
                evidence_marker(seg_id)
            ));
        }
        Ok(text)
    }

    fn refine(&self, req: &TextRequest) -> String {
        let limit = STEP_LIMIT
            .captures(&req.prompt)
            .and_then(|c| c[1].parse::<usize>().ok())
            .unwrap_or(8);
        let lines: Vec<(f64, f64, String)> = POOL_LINE
            .captures_iter(&req.prompt)
            .filter_map(|c| Some((c[1].parse().ok()?, c[2].parse().ok()?, c[3].to_string())))
            .collect();
        let (mut marked, mut rest): (Vec<_>, Vec<_>) =
            lines.into_iter().partition(|(_, _, t)| t.contains("[ref:"));
        rest.sort_by_key(|(a, b, t)| {
            self.pick_key(&[&req.sample_id, &a.to_string(), &b.to_string(), t])
        });
        marked.extend(rest);
        marked.truncate(limit);
        marked.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        let chain: Vec<serde_json::Value> = marked
            .into_iter()
            .map(|(a, b, t)| serde_json::json!({"start_time": a, "end_time": b, "evidence": t}))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "evidence_chain": chain })).expect("json")
    }

    fn pick_key(&self, parts: &[&str]) -> u64 {
        let seed = self.world.seed.to_string();
        let mut all = vec![seed.as_str()];
        all.extend_from_slice(parts);
        stable_u64(&all)
    }

    fn summarize(&self, req: &TextRequest) -> String {
        let steps: Vec<(String, String, String)> = CHAIN_LINE
            .captures_iter(&req.prompt)
            .map(|c| (c[1].to_string(), c[2].to_string(), c[3].to_string()))
            .collect();
        let mut cot = String::new();
        for (i, (a, b, text)) in steps.iter().enumerate() {
            let lead = match i {
                0 => "We first look at the interval",
                _ if i + 1 == steps.len() => "Finally, in the interval",
                _ => "Next, in the interval",
            };
            let body = text.trim_end_matches('.');
            cot.push_str(&format!("{lead} [{a}-{b}seconds], where {body}. "));
        }
        let n_options = options_in_prompt(&req.prompt).max(2);
        let dist = self
            .world
            .distribution(&req.sample_id, n_options, &req.prompt);
        let best =
            dist.probs.iter().enumerate().fold(
                0,
                |best, (i, &p)| if p > dist.probs[best] { i } else { best },
            );
        let letter = OPTION_LETTERS[best];
        cot.push_str(&format!(
            "Putting these observations in order, the answer is {letter}."
        ));
        serde_json::json!({
            "full_chain_of_thought": cot,
            "final_answer": letter.to_string(),
        })
        .to_string()
    }

    fn free_evidence(&self, req: &TextRequest) -> String {
        let variant = format!("{}:{}", req.temperature, req.attempt);
        let k = self.pick_key(&[&req.prompt, &variant]);
        let a = (k % 40) as f64 / 100.0;
        let b = a + 0.1 + ((k >> 8) % 20) as f64 / 100.0;
        let c = b + ((k >> 16) % 10) as f64 / 100.0;
        let d = (c + 0.2).min(1.0);
        format!(
            "[{a:.2}-{b:.2}] This clip 1 shows that {} {} which indicate the setting. \
             [{c:.2}-{d:.2}] This clip 2 shows that {} {} which indicate what happens next.",
            self.pick(&SUBJECTS, &[&variant, "s1"]),
            self.pick(&ACTIONS, &[&variant, "a1"]),
            self.pick(&SUBJECTS, &[&variant, "s2"]),
            self.pick(&ACTIONS, &[&variant, "a2"]),
        )
    }
}

fn options_in_prompt(prompt: &str) -> usize {
    OPTION_LETTERS
        .iter()
        .take_while(|l| prompt.contains(&format!(" {l}. ")) || prompt.contains(&format!("\n{l}. ")))
        .count()
}

impl Scorer for MockScorer {
    fn score_options(&self, req: &ScorerRequest) -> Result<OptionDistribution, ScorerError> {
        self.telemetry.record_call();
        self.telemetry.record_attempt();
        if req.options.len() < 2 {
            return Err(ScorerError::malformed("fewer than two options", ""));
        }
        Ok(self
            .world
            .distribution(&req.sample_id, req.options.len(), &req.context_text))
    }

    fn generate_text(&self, req: &TextRequest) -> Result<String, ScorerError> {
        self.telemetry.record_call();
        self.telemetry.record_attempt();
        if let Some(reply) = self.next_canned(req.purpose) {
            return Ok(reply);
        }
        match req.purpose {
            Purpose::Captioning => self
                .narrate(req)
                .inspect_err(|_| self.telemetry.record_failure()),
            Purpose::Refinement => Ok(self.refine(req)),
            Purpose::Summarization => Ok(self.summarize(req)),
            Purpose::DirectEvidence | Purpose::GtGuided => Ok(self.free_evidence(req)),
            Purpose::ChainScoring | Purpose::Filtering => {
                let n = options_in_prompt(&req.prompt).max(2);
                let dist = self.world.distribution(&req.sample_id, n, &req.prompt);
                let idx = dist.unique_argmax().unwrap_or(0);
                Ok(OPTION_LETTERS[idx].to_string())
            }
        }
    }

    fn identity(&self) -> String {
        let world = serde_json::to_string(&self.world).expect("world json");
        format!("mock/{}", &digest_hex(&[&world])[..16])
    }

    fn telemetry(&self) -> Option<&Telemetry> {
        Some(&self.telemetry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(b: f64) -> MockWorld {
        let mut w = MockWorld::new(b, 7);
        w.insert("s", 2, &["s/L1/1", "s/L1/4", "s/L3/0"]);
        w
    }

    fn req(context: &str, n: usize) -> ScorerRequest {
        ScorerRequest {
            sample_id: "s".into(),
            question: "q".into(),
            options: (0..n).map(|i| format!("o{i}")).collect(),
            context_text: context.into(),
            purpose: Purpose::ChainScoring,
        }
    }

    fn markers(ids: &[&str]) -> String {
        ids.iter()
            .map(|i| evidence_marker(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn full_coverage_puts_all_mass_on_answer() {
        let m = MockScorer::new(world(0.25));
        let d = m
            .score_options(&req(&markers(&["s/L1/1", "s/L1/4", "s/L3/0"]), 5))
            .unwrap();
        assert_eq!(d.probs, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_coverage_leaves_base_mass() {
        let m = MockScorer::new(world(0.25));
        let d = m.score_options(&req("nothing relevant", 5)).unwrap();
        assert_eq!(d.probs, vec![0.1875, 0.1875, 0.25, 0.1875, 0.1875]);
    }

    #[test]
    fn uniform_when_base_is_one_over_n() {
        let m = MockScorer::new(world(0.2));
        let d = m.score_options(&req("", 5)).unwrap();
        for p in d.probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn marker_ids_do_not_prefix_match() {
        let w = world(0.2);
        assert_eq!(w.coverage("s", &evidence_marker("s/L1/10")), 0.0);
        assert_eq!(w.coverage("s", &evidence_marker("s/L1/1")), 1.0 / 3.0);
    }

    #[test]
    fn narration_is_deterministic_and_marks_relevant_segments() {
        let m = MockScorer::new(world(0.2));
        let mut r = TextRequest::new("s", "prompt".into(), Purpose::Captioning);
        r.seg_id = Some("s/L1/4".into());
        let a = m.generate_text(&r).unwrap();
        assert_eq!(a, m.generate_text(&r).unwrap());
        assert!(a.starts_with("Evidence: "));
        assert!(a.contains("[ref:s/L1/4]"));
        r.seg_id = Some("s/L1/5".into());
        assert!(!m.generate_text(&r).unwrap().contains("[ref:"));
    }

    #[test]
    fn canned_replies_in_order() {
        let m = MockScorer::new(world(0.2))
            .with_canned(Purpose::DirectEvidence, vec!["one".into(), "two".into()]);
        let r = TextRequest::new("s", "p".into(), Purpose::DirectEvidence);
        assert_eq!(m.generate_text(&r).unwrap(), "one");
        assert_eq!(m.generate_text(&r).unwrap(), "two");
        assert_eq!(m.generate_text(&r).unwrap(), "two");
    }

    #[test]
    fn world_validation() {
        assert!(world(0.2).validate().is_ok());
        assert!(world(0.0).validate().is_err());
        let mut w = world(0.2);
        w.insert("t", 0, &[]);
        assert!(w.validate().is_err());
    }
}
