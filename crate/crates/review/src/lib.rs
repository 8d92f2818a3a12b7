//! Annotation service for distilled evidence chains.
//!
//! Routes:
//!
//! * `GET  /api/chains?offset=&limit=` chain summaries, paged
//! * `GET  /api/chains/{sample_id}` one chain with parsed spans
//! * `POST /api/scores` a rubric score; replaces the annotator's earlier one
//! * `GET  /api/report` per-aspect means and percentages
//! * `GET  /api/rubric` aspect questions and level descriptions
//!
//! Anything else is served from the optional static directory.

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use evchain::dataio::{load_qa_dataset, read_distilled, DataError, DatasetFormat};
use evchain::metrics::parse_spans;
use evchain::review::{rubric, AggregateReport, ScoreStore, ScoreSubmission, StoreError};
use evchain::types::{DistilledSample, EvidenceStep, TargetMode};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};
use tower_http::services::ServeDir;

pub const DEFAULT_PAGE: usize = 20;
pub const MAX_PAGE: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: no chains to review")]
    Empty { path: PathBuf },
    #[error("cannot serve on {addr}: {detail}")]
    Bind { addr: SocketAddr, detail: String },
    #[error("server stopped: {0}")]
    Serve(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanView {
    pub start: f64,
    pub end: f64,
}

/// Everything an annotator sees for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainView {
    pub sample_id: String,
    pub video_id: String,
    pub video_uri: String,
    pub duration_s: f64,
    pub question: String,
    pub options: Vec<String>,
    pub answer_idx: usize,
    pub answer: String,
    pub cot_text: String,
    /// Spans cited in `cot_text`, in seconds, in order of appearance.
    pub spans: Vec<SpanView>,
    pub evidence_steps: Vec<EvidenceStep>,
    pub target_modes: Vec<TargetMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub sample_id: String,
    pub question: String,
    pub hops: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainPage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<ChainSummary>,
}

/// Groups records by sample, keeping file order. Records of one sample share
/// the chain; the first record with a chain of thought supplies the text.
pub fn chain_views(records: &[DistilledSample], uris: &HashMap<String, String>) -> Vec<ChainView> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, ChainView> = HashMap::new();
    for r in records {
        let view = by_id.entry(r.sample_id.clone()).or_insert_with(|| {
            order.push(r.sample_id.clone());
            let uri = uris
                .get(&r.video_id)
                .cloned()
                .or_else(|| {
                    r.extra
                        .get("video_uri")
                        .and_then(|v| v.as_str())
                        .map(str::to_string)
                })
                .unwrap_or_else(|| r.video_id.clone());
            ChainView {
                sample_id: r.sample_id.clone(),
                video_id: r.video_id.clone(),
                video_uri: uri,
                duration_s: r.duration_s,
                question: r.question.clone(),
                options: r.options.clone(),
                answer_idx: r.answer_idx,
                answer: r.answer_text(),
                cot_text: String::new(),
                spans: Vec::new(),
                evidence_steps: r.evidence_steps.clone(),
                target_modes: Vec::new(),
            }
        });
        view.target_modes.push(r.target_mode);
        if view.cot_text.is_empty() && !r.cot_text.is_empty() {
            view.cot_text = r.cot_text.clone();
            view.spans = parse_spans(&r.cot_text, Some(r.duration_s))
                .into_iter()
                .map(|s| SpanView {
                    start: s.start,
                    end: s.end,
                })
                .collect();
        }
    }
    order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("grouped"))
        .collect()
}

/// Reads a distilled file and, when given, the QA dataset for video uris.
pub fn load_chains(
    distilled: &Path,
    dataset: Option<&Path>,
) -> Result<Vec<ChainView>, ReviewError> {
    let file = read_distilled(distilled)?;
    let mut uris = HashMap::new();
    if let Some(path) = dataset {
        let ds = load_qa_dataset(path, DatasetFormat::from_path(path)?)?;
        for s in ds.samples {
            uris.insert(s.video.id, s.video.uri);
        }
    }
    let views = chain_views(&file.records, &uris);
    if views.is_empty() {
        return Err(ReviewError::Empty {
            path: distilled.to_path_buf(),
        });
    }
    Ok(views)
}

/// Chains are immutable once loaded; scores go through one locked appender.
pub struct ReviewState {
    chains: Vec<ChainView>,
    index: BTreeMap<String, usize>,
    store: Mutex<ScoreStore>,
}

impl ReviewState {
    pub fn new(chains: Vec<ChainView>, store: ScoreStore) -> Self {
        let index = chains
            .iter()
            .enumerate()
            .map(|(i, c)| (c.sample_id.clone(), i))
            .collect();
        Self {
            chains,
            index,
            store: Mutex::new(store),
        }
    }

    pub fn chains(&self) -> &[ChainView] {
        &self.chains
    }

    pub fn chain(&self, sample_id: &str) -> Option<&ChainView> {
        self.index.get(sample_id).map(|&i| &self.chains[i])
    }

    pub fn page(&self, offset: usize, limit: usize) -> ChainPage {
        let limit = limit.clamp(1, MAX_PAGE);
        ChainPage {
            total: self.chains.len(),
            offset,
            limit,
            items: self
                .chains
                .iter()
                .skip(offset)
                .take(limit)
                .map(|c| ChainSummary {
                    sample_id: c.sample_id.clone(),
                    question: c.question.clone(),
                    hops: c.evidence_steps.len(),
                })
                .collect(),
        }
    }

    pub fn report(&self) -> AggregateReport {
        self.store.lock().expect("store lock").report()
    }
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

fn error(status: StatusCode, message: String, aspect: Option<String>) -> Response {
    let mut body = json!({ "error": message });
    if let Some(a) = aspect {
        body["aspect"] = json!(a);
    }
    (status, Json(body)).into_response()
}

async fn list_chains(
    State(state): State<Arc<ReviewState>>,
    Query(q): Query<PageQuery>,
) -> Json<ChainPage> {
    Json(state.page(q.offset.unwrap_or(0), q.limit.unwrap_or(DEFAULT_PAGE)))
}

async fn get_chain(
    State(state): State<Arc<ReviewState>>,
    UrlPath(id): UrlPath<String>,
) -> Response {
    match state.chain(&id) {
        Some(c) => Json(c.clone()).into_response(),
        None => error(
            StatusCode::NOT_FOUND,
            format!("unknown sample {id:?}"),
            None,
        ),
    }
}

async fn post_score(State(state): State<Arc<ReviewState>>, body: Bytes) -> Response {
    let submission: ScoreSubmission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => {
            return error(
                StatusCode::BAD_REQUEST,
                format!("invalid score body: {e}"),
                None,
            )
        }
    };
    if state.chain(&submission.sample_id).is_none() && !submission.sample_id.trim().is_empty() {
        return error(
            StatusCode::NOT_FOUND,
            format!("unknown sample {:?}", submission.sample_id),
            None,
        );
    }
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let score = match submission.into_score(now) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string(), e.aspect()),
    };
    let result = state
        .store
        .lock()
        .expect("store lock")
        .submit(score.clone());
    match result {
        Ok(replaced) => {
            let status = if replaced {
                StatusCode::OK
            } else {
                StatusCode::CREATED
            };
            (
                status,
                Json(json!({ "replaced": replaced, "score": score })),
            )
                .into_response()
        }
        Err(StoreError::Invalid(e)) => error(StatusCode::BAD_REQUEST, e.to_string(), e.aspect()),
        Err(e) => {
            log::error!("{e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None)
        }
    }
}

async fn get_report(State(state): State<Arc<ReviewState>>) -> Json<AggregateReport> {
    Json(state.report())
}

async fn get_rubric() -> Response {
    Json(rubric()).into_response()
}

pub fn router(state: Arc<ReviewState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/chains", get(list_chains))
        .route("/api/chains/{id}", get(get_chain))
        .route("/api/scores", axum::routing::post(post_score))
        .route("/api/report", get(get_report))
        .route("/api/rubric", get(get_rubric))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C.
pub fn serve_blocking(addr: SocketAddr, app: Router) -> Result<(), ReviewError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ReviewError::Serve(e.to_string()))?;
    rt.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(addr)
                .await
                .map_err(|e| ReviewError::Bind {
                    addr,
                    detail: e.to_string(),
                })?;
        log::info!(
            "review server listening on http://{}",
            listener
                .local_addr()
                .map_err(|e| ReviewError::Serve(e.to_string()))?
        );
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| ReviewError::Serve(e.to_string()))
    })
}
