//! Configuration, dataset ingestion and record-file persistence.
//!
//! Every persisted artifact is a record-lines file: one JSON header
//! `{format_version, kind, config_hash}` followed by one record per line. An
//! interrupted writer ends the file with a `{"truncated": true, ...}` marker.

use crate::distill::DistillConfig;
use crate::hashing::digest_hex;
use crate::metrics::WindowPolicy;
use crate::pool::PoolConfig;
use crate::scorer::RemoteConfig;
use crate::search::SearchConfig;
use crate::segmenter::{
    default_hierarchy, global_only_hierarchy, validate_hierarchy, Fraction, HierarchyLevel,
};
use crate::types::{validate_sample, DistilledSample, QaSample, VideoRef, MAX_OPTIONS};
use crate::TimeSpan;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {detail}")]
    UnreadableFile { path: PathBuf, detail: String },
    #[error("cannot write {path}: {detail}")]
    UnwritableFile { path: PathBuf, detail: String },
    #[error("unknown dataset format {0:?} (expected tabular or record-lines)")]
    UnknownFormat(String),
    #[error("{path}:{line}: field `{field}`: {detail}")]
    SchemaViolation {
        path: PathBuf,
        line: usize,
        field: String,
        detail: String,
    },
    #[error("{path}: holds {found:?} records, expected {expected:?}")]
    WrongKind {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: written under config {found}, current config is {expected}")]
    ConfigMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

fn unreadable(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::UnreadableFile {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn unwritable(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::UnwritableFile {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// A hierarchy level as written in the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    #[serde(rename = "L")]
    pub length: Fraction,
    #[serde(rename = "S")]
    pub stride: Fraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Only the whole-video level.
    pub hier_off: bool,
    /// Skip beam search and emit the refined pool as the chain.
    pub search_off: bool,
    /// Chains of a single step.
    pub multihop_off: bool,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    /// Comma-separated names: `hier`, `search`, `multihop`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut a = Ablation::default();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "hier" | "hier_off" => a.hier_off = true,
                "search" | "search_off" => a.search_off = true,
                "multihop" | "multihop_off" | "multi-hop" => a.multihop_off = true,
                other => return Err(format!("unknown ablation {other:?}")),
            }
        }
        Ok(a)
    }
}

/// How chains are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Search,
    DirectMultiEvidence,
    GtGuided,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Mock world fixture used with the mock scorer.
    pub mock_world: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub hierarchy: Vec<LevelSpec>,
    pub search: SearchConfig,
    pub pool: PoolConfig,
    pub distill: DistillConfig,
    pub ablation: Ablation,
    pub strategy: Strategy,
    pub gt_rounds: u32,
    pub window_policy: WindowPolicy,
    /// Worker threads; 0 uses every core.
    pub concurrency: usize,
    pub endpoint: RemoteConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hierarchy: default_hierarchy()
                .into_iter()
                .map(|l| LevelSpec {
                    length: l.length,
                    stride: l.stride,
                })
                .collect(),
            search: SearchConfig::default(),
            pool: PoolConfig::default(),
            distill: DistillConfig::default(),
            ablation: Ablation::default(),
            strategy: Strategy::default(),
            gt_rounds: 3,
            window_policy: WindowPolicy::default(),
            concurrency: 0,
            endpoint: RemoteConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| DataError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config toml")
    }

    /// Hierarchy after ablations.
    pub fn levels(&self) -> Result<Vec<HierarchyLevel>, DataError> {
        if self.ablation.hier_off {
            return Ok(global_only_hierarchy());
        }
        self.hierarchy
            .iter()
            .enumerate()
            .map(|(i, l)| {
                HierarchyLevel::new(i as u32 + 1, l.length, l.stride).map_err(|e| {
                    DataError::InvalidConfig(format!("hierarchy level {}: {e}", i + 1))
                })
            })
            .collect()
    }

    /// Search settings after ablations.
    pub fn effective_search(&self) -> SearchConfig {
        let mut s = self.search;
        if self.ablation.multihop_off {
            s.max_hops = 1;
        }
        s
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        let levels = self.levels()?;
        if let Err(e) = validate_hierarchy(&levels) {
            return bad(format!("hierarchy: {e}"));
        }
        if let Err(e) = self.effective_search().validate() {
            return bad(e.to_string());
        }
        if self.ablation.search_off && self.strategy != Strategy::Search {
            return bad("search_off only applies to the search strategy".into());
        }
        if self.distill.modes.is_empty() {
            return bad("distill.modes must name at least one target mode".into());
        }
        if self.pool.max_attempts == 0 {
            return bad("pool.max_attempts must be >= 1".into());
        }
        if self.gt_rounds == 0 {
            return bad("gt_rounds must be >= 1".into());
        }
        Ok(())
    }

    /// Digest of every setting that can change outputs (paths and the
    /// credential variable name are excluded).
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config json");
        if let Value::Object(m) = &mut v {
            m.remove("paths");
            m.remove("concurrency");
            if let Some(Value::Object(e)) = m.get_mut("endpoint") {
                e.remove("api_key_env");
            }
        }
        digest_hex(&[&v.to_string()])[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Tabular,
    RecordLines,
}

impl std::str::FromStr for DatasetFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tabular" | "csv" => Ok(Self::Tabular),
            "record-lines" | "jsonl" => Ok(Self::RecordLines),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "csv" => Ok(Self::Tabular),
            "jsonl" | "ndjson" => Ok(Self::RecordLines),
            other => Err(DataError::UnknownFormat(other.to_string())),
        }
    }
}

/// A row that failed validation; `row` is 1-based over data rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub row: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<QaSample>,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Deserialize)]
struct TabularRow {
    sample_id: String,
    video_id: String,
    duration_s: String,
    #[serde(default)]
    uri: Option<String>,
    question: String,
    #[serde(default)]
    option_0: Option<String>,
    #[serde(default)]
    option_1: Option<String>,
    #[serde(default)]
    option_2: Option<String>,
    #[serde(default)]
    option_3: Option<String>,
    #[serde(default)]
    option_4: Option<String>,
    answer_idx: String,
    #[serde(default)]
    gt_start: Option<String>,
    #[serde(default)]
    gt_end: Option<String>,
}

fn non_blank(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|t| !t.is_empty())
}

impl TabularRow {
    fn into_sample(self) -> Result<QaSample, Vec<String>> {
        let mut errs = Vec::new();
        let slots = [
            &self.option_0,
            &self.option_1,
            &self.option_2,
            &self.option_3,
            &self.option_4,
        ];
        let filled = slots
            .iter()
            .rposition(|o| non_blank(o).is_some())
            .map_or(0, |i| i + 1);
        let mut options = Vec::with_capacity(MAX_OPTIONS);
        for (i, slot) in slots.iter().take(filled).enumerate() {
            match non_blank(slot) {
                Some(t) => options.push(t.to_string()),
                None => errs.push(format!("option_{i} is missing")),
            }
        }
        let duration_s = self.duration_s.trim().parse::<f64>().unwrap_or_else(|_| {
            errs.push("duration_s is not a number".into());
            f64::NAN
        });
        let answer_idx = self.answer_idx.trim().parse::<usize>().unwrap_or_else(|_| {
            errs.push("answer_idx is not a non-negative integer".into());
            usize::MAX
        });
        let gt_window = match (non_blank(&self.gt_start), non_blank(&self.gt_end)) {
            (None, None) => None,
            (Some(a), Some(b)) => match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(a), Ok(b)) => Some(TimeSpan { start: a, end: b }),
                _ => {
                    errs.push("gt_window bounds are not numbers".into());
                    None
                }
            },
            _ => {
                errs.push("gt_window needs both gt_start and gt_end".into());
                None
            }
        };
        if !errs.is_empty() {
            return Err(errs);
        }
        Ok(QaSample {
            sample_id: self.sample_id,
            video: VideoRef {
                id: self.video_id,
                duration_s,
                uri: self.uri.unwrap_or_default(),
            },
            question: self.question,
            options,
            answer_idx,
            gt_window,
        })
    }
}

/// Line number, sample id if readable, and the parsed sample or its problems.
type ParsedRow = (usize, Option<String>, Result<QaSample, Vec<String>>);

/// Loads a multiple-choice dataset. Invalid rows become rejects; valid rows
/// pass through in file order.
pub fn load_qa_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| unreadable(path, e))?;
    let rows: Vec<ParsedRow> = match format {
        DatasetFormat::Tabular => {
            let mut rdr = csv::ReaderBuilder::new()
                .trim(csv::Trim::Headers)
                .from_reader(file);
            let mut out = Vec::new();
            for (i, rec) in rdr.deserialize::<TabularRow>().enumerate() {
                let (id, parsed) = match rec {
                    Ok(row) => (Some(row.sample_id.clone()), row.into_sample()),
                    Err(e) => (None, Err(vec![e.to_string()])),
                };
                out.push((i + 1, id, parsed));
            }
            out
        }
        DatasetFormat::RecordLines => {
            let mut out = Vec::new();
            let mut row = 0;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| unreadable(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: Result<Value, _> = serde_json::from_str(&line);
                if matches!(&value, Ok(v) if v.get("format_version").is_some()) {
                    continue;
                }
                row += 1;
                let id = value
                    .as_ref()
                    .ok()
                    .and_then(|v| v.get("sample_id"))
                    .and_then(Value::as_str)
                    .map(str::to_string);
                let parsed = value
                    .and_then(serde_json::from_value::<QaSample>)
                    .map_err(|e| vec![e.to_string()]);
                out.push((row, id, parsed));
            }
            out
        }
    };
    let mut ds = Dataset::default();
    let mut seen = HashSet::new();
    for (row, id, parsed) in rows {
        match parsed {
            Ok(sample) => {
                let mut reasons = validate_sample(&sample);
                if !seen.insert(sample.sample_id.clone()) {
                    reasons.push("sample_id is duplicated".into());
                }
                if reasons.is_empty() {
                    ds.samples.push(sample);
                } else {
                    ds.rejects.push(Reject {
                        row,
                        sample_id: Some(sample.sample_id),
                        reasons,
                    });
                }
            }
            Err(reasons) => ds.rejects.push(Reject {
                row,
                sample_id: id.filter(|i| !i.trim().is_empty()),
                reasons,
            }),
        }
    }
    if ds.samples.is_empty() && ds.rejects.is_empty() {
        log::warn!("{}: dataset is empty", path.display());
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
}

/// Last line of a file whose writer was interrupted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationMarker {
    pub truncated: bool,
    pub reason: String,
    pub records_written: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordFile<T> {
    pub header: Header,
    pub records: Vec<T>,
    pub truncation: Option<TruncationMarker>,
}

/// Streams records to a file behind a header line.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
    count: usize,
}

impl RecordWriter {
    pub fn create(path: &Path, kind: &str, config_hash: &str) -> Result<Self, DataError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| unwritable(path, e))?;
        }
        let file = File::create(path).map_err(|e| unwritable(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            count: 0,
        };
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
        };
        w.line(&header)?;
        Ok(w)
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<(), DataError> {
        let text = serde_json::to_string(value).map_err(|e| unwritable(&self.path, e))?;
        self.out
            .write_all(text.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| unwritable(&self.path, e))
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), DataError> {
        self.line(record)?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(mut self) -> Result<usize, DataError> {
        self.out.flush().map_err(|e| unwritable(&self.path, e))?;
        Ok(self.count)
    }

    /// Ends the file with a truncation marker.
    pub fn truncate(mut self, reason: &str) -> Result<usize, DataError> {
        let marker = TruncationMarker {
            truncated: true,
            reason: reason.to_string(),
            records_written: self.count,
        };
        self.line(&marker)?;
        self.finish()
    }
}

pub fn write_records<T: Serialize>(
    path: &Path,
    kind: &str,
    config_hash: &str,
    records: &[T],
) -> Result<usize, DataError> {
    let mut w = RecordWriter::create(path, kind, config_hash)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

fn violation(path: &Path, line: usize, field: &str, detail: impl Into<String>) -> DataError {
    DataError::SchemaViolation {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        detail: detail.into(),
    }
}

/// Reads a record file, checking its kind. `check` sees each raw record
/// with its 1-based line number before it is decoded.
pub fn read_records_with<T, F>(
    path: &Path,
    kind: &str,
    mut check: F,
) -> Result<RecordFile<T>, DataError>
where
    T: DeserializeOwned,
    F: FnMut(&Value, usize) -> Result<(), DataError>,
{
    let file = File::open(path).map_err(|e| unreadable(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = loop {
        let Some((i, line)) = lines.next() else {
            return Err(violation(
                path,
                1,
                "format_version",
                "missing header record",
            ));
        };
        let line = line.map_err(|e| unreadable(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        break serde_json::from_str(&line)
            .map_err(|e| violation(path, i + 1, "format_version", e.to_string()))?;
    };
    if header.format_version != FORMAT_VERSION {
        return Err(violation(
            path,
            1,
            "format_version",
            format!("unsupported version {}", header.format_version),
        ));
    }
    if header.kind != kind {
        return Err(DataError::WrongKind {
            path: path.to_path_buf(),
            expected: kind.to_string(),
            found: header.kind,
        });
    }
    let mut records = Vec::new();
    let mut truncation = None;
    for (i, line) in lines {
        let line = line.map_err(|e| unreadable(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| violation(path, lineno, "record", e.to_string()))?;
        if value.get("truncated").and_then(Value::as_bool) == Some(true) {
            truncation = Some(
                serde_json::from_value(value)
                    .map_err(|e| violation(path, lineno, "truncated", e.to_string()))?,
            );
            break;
        }
        check(&value, lineno)?;
        let rec = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            let field = msg.split('`').nth(1).unwrap_or("record").to_string();
            violation(path, lineno, &field, msg)
        })?;
        records.push(rec);
    }
    Ok(RecordFile {
        header,
        records,
        truncation,
    })
}

pub fn read_records<T: DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<RecordFile<T>, DataError> {
    read_records_with(path, kind, |_, _| Ok(()))
}

/// Fails unless the file was written under `config_hash`.
pub fn ensure_config<T>(
    file: &RecordFile<T>,
    path: &Path,
    config_hash: &str,
) -> Result<(), DataError> {
    if file.header.config_hash != config_hash {
        return Err(DataError::ConfigMismatch {
            path: path.to_path_buf(),
            expected: config_hash.to_string(),
            found: file.header.config_hash.clone(),
        });
    }
    Ok(())
}

pub const DISTILLED_KIND: &str = "distilled";

const DISTILLED_REQUIRED: [&str; 8] = [
    "sample_id",
    "video_id",
    "duration_s",
    "question",
    "options",
    "answer_idx",
    "target_mode",
    "evidence_steps",
];

fn check_distilled(path: &Path, v: &Value, line: usize) -> Result<(), DataError> {
    for field in DISTILLED_REQUIRED {
        if v.get(field).is_none() {
            return Err(violation(path, line, field, "missing"));
        }
    }
    let mode = v.get("target_mode").and_then(Value::as_str).unwrap_or("");
    let cot = v.get("cot_text");
    if cot.is_none() {
        return Err(violation(path, line, "cot_text", "missing"));
    }
    if matches!(mode, "QEA" | "QAE")
        && cot
            .and_then(Value::as_str)
            .is_none_or(|s| s.trim().is_empty())
    {
        return Err(violation(
            path,
            line,
            "cot_text",
            format!("required in {mode} mode"),
        ));
    }
    Ok(())
}

pub fn write_distilled(
    path: &Path,
    config_hash: &str,
    records: &[DistilledSample],
) -> Result<usize, DataError> {
    write_records(path, DISTILLED_KIND, config_hash, records)
}

pub fn read_distilled(path: &Path) -> Result<RecordFile<DistilledSample>, DataError> {
    read_records_with(path, DISTILLED_KIND, |v, line| {
        check_distilled(path, v, line)
    })
}

/// Writes pretty JSON (reports and other single-document outputs).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| unwritable(path, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| unwritable(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| unwritable(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
    serde_json::from_str(&text).map_err(|e| violation(path, e.line(), "document", e.to_string()))
}
