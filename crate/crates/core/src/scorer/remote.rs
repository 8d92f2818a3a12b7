//! Client for OpenAI-style chat completion endpoints.
//!
//! Option likelihoods come from the log-probabilities of the first answer
//! token: the top alternatives are matched against the option letters and
//! softmax-normalized over the letters that appear. Endpoints that return no
//! log-probabilities are sampled repeatedly instead and the answer
//! frequencies are used.

use super::{Scorer, ScorerError, ScorerRequest, Telemetry, TextRequest};
use crate::prompts;
use crate::types::{match_option, OptionDistribution, OPTION_LETTERS};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full URL of the chat completions route.
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_s: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub top_logprobs: u32,
    pub max_tokens: u32,
    /// Samples drawn when the endpoint has no log-probabilities.
    pub fallback_samples: usize,
    pub fallback_temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".to_string(),
            model: "default".to_string(),
            api_key_env: "EVCHAIN_API_KEY".to_string(),
            timeout_s: 120,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 8,
            top_logprobs: 20,
            max_tokens: 1024,
            fallback_samples: 5,
            fallback_temperature: 0.7,
            seed: None,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate wait");
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteScorer {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    gate: Gate,
    telemetry: Telemetry,
}

/// Text and first-token alternatives of one completion.
#[derive(Debug, Clone, PartialEq)]
struct Completion {
    text: String,
    first_token_logprobs: Option<Vec<(String, f64)>>,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Result<Self, ScorerError> {
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| ScorerError::RemoteUnavailable {
                attempts: 0,
                detail: format!("cannot build http client: {e}"),
                payload: String::new(),
            })?;
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            api_key,
            client,
            telemetry: Telemetry::default(),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn request_body(&self, req: &TextRequest, max_tokens: u32, logprobs: bool) -> Value {
        let content = match &req.clip {
            Some(clip) => json!([
                {"type": "text", "text": req.prompt},
                {"type": "video_url", "video_url": {"url": clip.uri, "start_s": clip.t_s, "end_s": clip.t_e}},
            ]),
            None => json!(req.prompt),
        };
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": req.temperature,
            "max_tokens": max_tokens,
        });
        if logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.config.top_logprobs);
        }
        if let Some(seed) = self.config.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn post(&self, body: &Value) -> Result<Completion, ScorerError> {
        self.telemetry.record_call();
        let _slot = self.gate.enter();
        let mut last = String::new();
        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            self.telemetry.record_attempt();
            let mut rb = self.client.post(&self.config.url).json(body);
            if let Some(key) = &self.api_key {
                rb = rb.bearer_auth(key);
            }
            match rb.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return parse_completion(&text);
                    }
                    let transient = status.is_server_error() || status.as_u16() == 429;
                    if !transient {
                        self.telemetry.record_failure();
                        return Err(ScorerError::RemoteUnavailable {
                            attempts: attempt + 1,
                            detail: format!("http {status}"),
                            payload: text,
                        });
                    }
                    last = format!("http {status}: {text}");
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("endpoint attempt {} failed: {last}", attempt + 1);
        }
        self.telemetry.record_failure();
        Err(ScorerError::RemoteUnavailable {
            attempts,
            detail: "retries exhausted".to_string(),
            payload: last,
        })
    }

    fn sample_answers(
        &self,
        req: &ScorerRequest,
        prompt: &str,
    ) -> Result<OptionDistribution, ScorerError> {
        let mut counts = vec![0usize; req.options.len()];
        let mut replies = Vec::new();
        for i in 0..self.config.fallback_samples {
            let mut tr = TextRequest::new(&req.sample_id, prompt.to_string(), req.purpose);
            tr.temperature = self.config.fallback_temperature;
            tr.attempt = i as u32;
            let body = self.request_body(&tr, 8, false);
            let c = self.post(&body)?;
            if let Some(idx) = match_option(&c.text, &req.options) {
                counts[idx] += 1;
            }
            replies.push(c.text);
        }
        OptionDistribution::from_counts(&counts).map_err(|_| {
            ScorerError::malformed("no sampled reply named an option", replies.join("\n---\n"))
        })
    }
}

fn parse_completion(payload: &str) -> Result<Completion, ScorerError> {
    let v: Value = serde_json::from_str(payload)
        .map_err(|e| ScorerError::malformed(format!("invalid json: {e}"), payload))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ScorerError::malformed("missing choices[0]", payload))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .or_else(|| choice.get("text").and_then(Value::as_str))
        .ok_or_else(|| ScorerError::malformed("missing message content", payload))?
        .to_string();
    let first_token_logprobs = choice
        .pointer("/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .map(|alts| {
            alts.iter()
                .filter_map(|a| {
                    Some((
                        a.get("token")?.as_str()?.to_string(),
                        a.get("logprob")?.as_f64()?,
                    ))
                })
                .collect::<Vec<_>>()
        })
        .filter(|alts| !alts.is_empty());
    Ok(Completion {
        text,
        first_token_logprobs,
    })
}

/// Best log-probability per option letter; letters never seen stay `-inf`.
fn letter_logits(alternatives: &[(String, f64)], n_options: usize) -> Vec<f64> {
    let mut logits = vec![f64::NEG_INFINITY; n_options];
    for (token, lp) in alternatives {
        let t = token
            .trim()
            .trim_matches(|c| c == '(' || c == ')' || c == '.');
        let mut chars = t.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if let Some(i) = OPTION_LETTERS[..n_options].iter().position(|&l| l == c) {
                logits[i] = logits[i].max(*lp);
            }
        }
    }
    logits
}

impl Scorer for RemoteScorer {
    fn score_options(&self, req: &ScorerRequest) -> Result<OptionDistribution, ScorerError> {
        let prompt = prompts::answer_scoring(&req.question, &req.options, &req.context_text);
        let tr = TextRequest::new(&req.sample_id, prompt.clone(), req.purpose);
        let body = self.request_body(&tr, 1, true);
        let completion = self.post(&body)?;
        if let Some(alts) = &completion.first_token_logprobs {
            let logits = letter_logits(alts, req.options.len());
            if logits.iter().any(|l| l.is_finite()) {
                return Ok(OptionDistribution::from_logits(&logits)?);
            }
            return Err(ScorerError::malformed(
                "no option letter among first-token alternatives",
                format!("{alts:?}"),
            ));
        }
        if self.config.fallback_samples == 0 {
            return Err(ScorerError::malformed(
                "endpoint returned no logprobs",
                completion.text,
            ));
        }
        self.sample_answers(req, &prompt)
    }

    fn generate_text(&self, req: &TextRequest) -> Result<String, ScorerError> {
        if req.prompt.trim().is_empty() {
            return Err(ScorerError::malformed("empty prompt", ""));
        }
        let body = self.request_body(req, self.config.max_tokens, false);
        let completion = self.post(&body)?;
        if completion.text.trim().is_empty() {
            return Err(ScorerError::malformed("empty completion", completion.text));
        }
        Ok(completion.text)
    }

    fn identity(&self) -> String {
        format!("{}#{}", self.config.url, self.config.model)
    }

    fn telemetry(&self) -> Option<&Telemetry> {
        Some(&self.telemetry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letters_from_alternatives() {
        let alts = vec![
            (" B".to_string(), -0.1),
            ("A".to_string(), -2.5),
            ("(B".to_string(), -3.0),
            ("Because".to_string(), -1.0),
            ("E".to_string(), -0.5),
        ];
        let l = letter_logits(&alts, 3);
        assert_eq!(l[0], -2.5);
        assert_eq!(l[1], -0.1);
        assert_eq!(l[2], f64::NEG_INFINITY);
    }

    #[test]
    fn parses_chat_payload() {
        let payload = r#"{"choices":[{"message":{"content":"B"},
            "logprobs":{"content":[{"token":"B","logprob":-0.2,
              "top_logprobs":[{"token":"B","logprob":-0.2},{"token":"A","logprob":-1.8}]}]}}]}"#;
        let c = parse_completion(payload).unwrap();
        assert_eq!(c.text, "B");
        assert_eq!(c.first_token_logprobs.unwrap().len(), 2);
        let c = parse_completion(r#"{"choices":[{"message":{"content":"hi"}}]}"#).unwrap();
        assert!(c.first_token_logprobs.is_none());
        assert!(matches!(
            parse_completion(r#"{"nope":1}"#),
            Err(ScorerError::MalformedResponse { .. })
        ));
        assert!(matches!(
            parse_completion("<html>"),
            Err(ScorerError::MalformedResponse { .. })
        ));
    }

    #[test]
    fn request_body_carries_clip() {
        let s = RemoteScorer::new(RemoteConfig::default()).unwrap();
        let mut tr = TextRequest::new("s", "describe".into(), super::super::Purpose::Captioning);
        tr.clip = Some(super::super::VideoClip {
            uri: "file:///v.mp4".into(),
            t_s: 1.0,
            t_e: 2.0,
        });
        let body = s.request_body(&tr, 64, false);
        assert_eq!(
            body["messages"][0]["content"][1]["video_url"]["url"],
            "file:///v.mp4"
        );
        assert_eq!(body["messages"][0]["content"][1]["video_url"]["end_s"], 2.0);
        assert!(body.get("logprobs").is_none());
        let body = s.request_body(
            &TextRequest::new("s", "x".into(), super::super::Purpose::Filtering),
            1,
            true,
        );
        assert_eq!(body["messages"][0]["content"], "x");
        assert_eq!(body["top_logprobs"], 20);
    }
}
