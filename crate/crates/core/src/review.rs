//! Human rubric scores for distilled chains: validation, aggregation and an
//! append-only store where the latest score per (sample, annotator) wins.

use crate::dataio::{Header, FORMAT_VERSION};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

pub const SCORES_KIND: &str = "rubric_scores";
pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Aspect {
    Temporal,
    Faithfulness,
    Logical,
    Relevance,
    Completeness,
}

impl Aspect {
    pub const ALL: [Aspect; 5] = [
        Aspect::Temporal,
        Aspect::Faithfulness,
        Aspect::Logical,
        Aspect::Relevance,
        Aspect::Completeness,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Aspect::Temporal => "Temporal",
            Aspect::Faithfulness => "Faithfulness",
            Aspect::Logical => "Logical",
            Aspect::Relevance => "Relevance",
            Aspect::Completeness => "Completeness",
        }
    }

    pub fn question(&self) -> &'static str {
        match self {
            Aspect::Temporal => "Does the temporal window match the evidence text?",
            Aspect::Faithfulness => "Is the evidence faithful to the video content?",
            Aspect::Logical => "Is the reasoning logical across the evidence?",
            Aspect::Relevance => "How relevant is the evidence chain to the video/question?",
            Aspect::Completeness => {
                "Does the evidence chain capture all required information in the video to answer the question?"
            }
        }
    }

    /// Rubric text for a score of 1, 2 or 3.
    pub fn rubric(&self, score: u8) -> Option<&'static str> {
        let row = match self {
            Aspect::Temporal => [
                "The evidence significantly misrepresents the time sequence.",
                "The temporal sequence is somewhat accurate but contains minor errors.",
                "The evidence correctly identifies the time sequence of events.",
            ],
            Aspect::Faithfulness => [
                "The evidence is misleading or contains major inaccuracies.",
                "The evidence is mostly accurate but includes minor inconsistencies.",
                "The evidence is fully consistent with the video content.",
            ],
            Aspect::Logical => [
                "The reasoning is illogical or lacks coherence.",
                "The reasoning is partially logical but has gaps or weak links.",
                "The evidence forms a coherent and logical reasoning chain.",
            ],
            Aspect::Relevance => [
                "The evidence is irrelevant or off-topic.",
                "The evidence is somewhat relevant but includes unnecessary information.",
                "The evidence is directly relevant to the question and frames.",
            ],
            Aspect::Completeness => [
                "The evidence is incomplete and misses significant details.",
                "The evidence captures most key details but omits some minor elements.",
                "The evidence includes all critical information needed to answer the question.",
            ],
        };
        (MIN_SCORE..=MAX_SCORE)
            .contains(&score)
            .then(|| row[(score - 1) as usize])
    }
}

impl std::fmt::Display for Aspect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Aspect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Aspect::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown aspect {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricEntry {
    pub aspect: Aspect,
    pub question: String,
    /// Score to its description.
    pub levels: BTreeMap<u8, String>,
}

pub fn rubric() -> Vec<RubricEntry> {
    Aspect::ALL
        .into_iter()
        .map(|aspect| RubricEntry {
            aspect,
            question: aspect.question().to_string(),
            levels: (MIN_SCORE..=MAX_SCORE)
                .map(|s| (s, aspect.rubric(s).expect("in range").to_string()))
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScoreError {
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
    #[error("aspect {0} is missing")]
    MissingAspect(Aspect),
    #[error("aspect {aspect}: {value} is not in {MIN_SCORE}..={MAX_SCORE}")]
    OutOfRange { aspect: String, value: String },
    #[error("unknown aspect {0:?}")]
    UnknownAspect(String),
}

impl ScoreError {
    /// The aspect the error is about, if any.
    pub fn aspect(&self) -> Option<String> {
        match self {
            ScoreError::MissingAspect(a) => Some(a.to_string()),
            ScoreError::OutOfRange { aspect, .. } | ScoreError::UnknownAspect(aspect) => {
                Some(aspect.clone())
            }
            ScoreError::EmptyField(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricScore {
    pub sample_id: String,
    pub annotator_id: String,
    pub scores: BTreeMap<Aspect, u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    #[serde(default)]
    pub timestamp: u64,
}

impl RubricScore {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.sample_id.trim().is_empty() {
            return Err(ScoreError::EmptyField("sample_id"));
        }
        if self.annotator_id.trim().is_empty() {
            return Err(ScoreError::EmptyField("annotator_id"));
        }
        for aspect in Aspect::ALL {
            match self.scores.get(&aspect) {
                None => return Err(ScoreError::MissingAspect(aspect)),
                Some(v) if !(MIN_SCORE..=MAX_SCORE).contains(v) => {
                    return Err(ScoreError::OutOfRange {
                        aspect: aspect.to_string(),
                        value: v.to_string(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.scores.values().map(|&v| v as f64).sum::<f64>() / self.scores.len().max(1) as f64
    }
}

/// A score as submitted by a client: aspect names and values are checked
/// here so errors can name the offending aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSubmission {
    #[serde(default)]
    pub sample_id: String,
    #[serde(default)]
    pub annotator_id: String,
    #[serde(default)]
    pub scores: BTreeMap<String, Value>,
    #[serde(default)]
    pub comment: Option<String>,
}

impl ScoreSubmission {
    pub fn into_score(self, timestamp: u64) -> Result<RubricScore, ScoreError> {
        let mut scores = BTreeMap::new();
        for (name, value) in &self.scores {
            let aspect: Aspect = name
                .parse()
                .map_err(|_| ScoreError::UnknownAspect(name.clone()))?;
            let v = value
                .as_u64()
                .filter(|v| (MIN_SCORE as u64..=MAX_SCORE as u64).contains(v))
                .ok_or_else(|| ScoreError::OutOfRange {
                    aspect: aspect.to_string(),
                    value: value.to_string(),
                })?;
            scores.insert(aspect, v as u8);
        }
        let score = RubricScore {
            sample_id: self.sample_id,
            annotator_id: self.annotator_id,
            scores,
            comment: self.comment.filter(|c| !c.trim().is_empty()),
            timestamp,
        };
        score.validate()?;
        Ok(score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectStat {
    pub mean: f64,
    /// `mean / 3 * 100`.
    pub percentage: f64,
    pub count: usize,
}

impl AspectStat {
    fn from_values(values: &[u8]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
        Some(Self {
            mean,
            percentage: percentage(mean),
            count: values.len(),
        })
    }
}

pub fn percentage(mean: f64) -> f64 {
    mean / MAX_SCORE as f64 * 100.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateReport {
    pub records: usize,
    pub samples: usize,
    pub annotators: usize,
    pub per_aspect: BTreeMap<Aspect, AspectStat>,
    /// Over every aspect value of every record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<AspectStat>,
}

impl AggregateReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>6} {:>8} {:>6}\n",
            "aspect", "mean", "percent", "n"
        );
        let rows = self
            .per_aspect
            .iter()
            .map(|(a, s)| (a.as_str(), s))
            .chain(self.overall.iter().map(|s| ("Overall", s)));
        for (name, s) in rows {
            out.push_str(&format!(
                "{name:<14} {:>6.3} {:>7.2}% {:>6}\n",
                s.mean, s.percentage, s.count
            ));
        }
        out
    }
}

/// Per-aspect and overall means; an empty input gives an empty report.
pub fn aggregate_report<'a, I>(scores: I) -> AggregateReport
where
    I: IntoIterator<Item = &'a RubricScore>,
{
    let mut per: BTreeMap<Aspect, Vec<u8>> = BTreeMap::new();
    let mut all = Vec::new();
    let mut samples = BTreeSet::new();
    let mut annotators = BTreeSet::new();
    let mut records = 0;
    for s in scores {
        records += 1;
        samples.insert(s.sample_id.as_str());
        annotators.insert(s.annotator_id.as_str());
        for (&a, &v) in &s.scores {
            per.entry(a).or_default().push(v);
            all.push(v);
        }
    }
    AggregateReport {
        records,
        samples: samples.len(),
        annotators: annotators.len(),
        per_aspect: per
            .into_iter()
            .filter_map(|(a, v)| AspectStat::from_values(&v).map(|s| (a, s)))
            .collect(),
        overall: AspectStat::from_values(&all),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("score store {path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("score store {path}: not a {SCORES_KIND} file")]
    WrongKind { path: PathBuf },
    #[error(transparent)]
    Invalid(#[from] ScoreError),
}

type Key = (String, String);

/// Append-only score log with an in-memory view keyed by
/// (sample_id, annotator_id).
pub struct ScoreStore {
    path: Option<PathBuf>,
    file: Option<File>,
    latest: BTreeMap<Key, RubricScore>,
}

impl ScoreStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            file: None,
            latest: BTreeMap::new(),
        }
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io = |e: std::io::Error| StoreError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        let history = if path.exists() {
            replay(path)?
        } else {
            Vec::new()
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if file.metadata().map_err(io)?.len() == 0 {
            let header = Header {
                format_version: FORMAT_VERSION,
                kind: SCORES_KIND.to_string(),
                config_hash: String::new(),
            };
            let line = serde_json::to_string(&header).expect("header json");
            writeln!(file, "{line}").map_err(io)?;
        }
        let mut store = Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            latest: BTreeMap::new(),
        };
        for s in history {
            store
                .latest
                .insert((s.sample_id.clone(), s.annotator_id.clone()), s);
        }
        Ok(store)
    }

    /// Validates, appends and replaces any earlier score by the same
    /// annotator for the same sample. Returns whether one was replaced.
    pub fn submit(&mut self, score: RubricScore) -> Result<bool, StoreError> {
        score.validate()?;
        if let (Some(file), Some(path)) = (&mut self.file, &self.path) {
            let line = serde_json::to_string(&score).expect("score json");
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| StoreError::Io {
                    path: path.clone(),
                    detail: e.to_string(),
                })?;
        }
        let key = (score.sample_id.clone(), score.annotator_id.clone());
        Ok(self.latest.insert(key, score).is_some())
    }

    pub fn scores(&self) -> impl Iterator<Item = &RubricScore> {
        self.latest.values()
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn report(&self) -> AggregateReport {
        aggregate_report(self.scores())
    }
}

/// Every valid score in log order. A torn final line is skipped.
pub fn replay(path: &Path) -> Result<Vec<RubricScore>, StoreError> {
    let io = |e: std::io::Error| StoreError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    let mut header_seen = false;
    for line in reader.lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let h: Header = serde_json::from_str(&line).map_err(|_| StoreError::WrongKind {
                path: path.to_path_buf(),
            })?;
            if h.kind != SCORES_KIND {
                return Err(StoreError::WrongKind {
                    path: path.to_path_buf(),
                });
            }
            header_seen = true;
            continue;
        }
        match serde_json::from_str::<RubricScore>(&line) {
            Ok(s) if s.validate().is_ok() => out.push(s),
            _ => log::warn!("{}: skipping unreadable score line", path.display()),
        }
    }
    Ok(out)
}

/// Latest score per (sample, annotator) from a log.
pub fn latest_scores(history: Vec<RubricScore>) -> Vec<RubricScore> {
    let mut latest: BTreeMap<Key, RubricScore> = BTreeMap::new();
    for s in history {
        latest.insert((s.sample_id.clone(), s.annotator_id.clone()), s);
    }
    latest.into_values().collect()
}
