//! HTTP front end for a live annotation session.
//!
//! Routes:
//!
//! - `GET /api/next?annotator=ID`: next query for the annotator, 204 when
//!   nothing is left for them
//! - `POST /api/vote`: `{annotator, image_id, answer_a, answer_b, difficulty}`
//! - `GET /api/progress`
//! - `GET /api/ranking`: ranking over the verdicts finalized so far
//! - `GET /images/{image_id}`: image bytes from the configured directory
//!
//! Anything else is served from the optional UI directory.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mad_core::labeling::format_verdicts;
use mad_core::ranking::ordinal_ranks;
use mad_core::session::{Progress, Session, SessionError, VoteAck};
use mad_core::{AnnotationVote, AnnotatorId, Error, ImageId, RankSettings, TaxonomyGraph};
use serde::{Deserialize, Serialize};
use tower_http::services::{ServeDir, ServeFile};

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Directory holding image files named by image id, with or without an
    /// extension.
    pub image_dir: Option<PathBuf>,
    /// Static annotation UI, served at `/`.
    pub ui_dir: Option<PathBuf>,
    /// Where the verdict file is written once every query is answered.
    pub verdicts_out: Option<PathBuf>,
    pub rank: RankSettings,
}

pub struct AppState {
    session: Mutex<Session>,
    graph: Arc<TaxonomyGraph>,
    config: ServerConfig,
}

impl AppState {
    pub fn new(session: Session, graph: Arc<TaxonomyGraph>, config: ServerConfig) -> Arc<Self> {
        Arc::new(Self {
            session: Mutex::new(session),
            graph,
            config,
        })
    }

    /// All mutations go through this lock, so votes are applied one at a
    /// time in log order.
    pub fn session(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Session(s) => match s {
                SessionError::UnknownAnnotator(_) => StatusCode::FORBIDDEN,
                SessionError::InvalidId(_) => StatusCode::BAD_REQUEST,
                SessionError::NoLease { .. } | SessionError::DuplicateVote { .. } | SessionError::NotPending(_) => {
                    StatusCode::CONFLICT
                }
                SessionError::CorruptLog { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            },
            Error::TooFewModels(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub image_id: String,
    pub image_url: String,
    pub question_a: String,
    pub question_b: String,
    pub question_a_name: String,
    pub question_b_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRequest {
    pub annotator: String,
    pub image_id: String,
    pub answer_a: bool,
    pub answer_b: bool,
    #[serde(default)]
    pub difficulty: bool,
}

#[derive(Debug, Serialize)]
pub struct VoteResponse {
    #[serde(flatten)]
    pub ack: VoteAck,
    pub complete: bool,
}

#[derive(Debug, Serialize)]
pub struct RankingPayload {
    pub partial: bool,
    pub models: Vec<String>,
    pub r: Vec<f64>,
    pub rank: Vec<usize>,
    pub tied: Vec<bool>,
    pub eigenvalue: f64,
    /// Diagonal entries are undefined and serialize as null.
    pub accuracy: Vec<Vec<f64>>,
    pub dominance: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct NextParams {
    annotator: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/api/next", get(next_query))
        .route("/api/vote", post(submit_vote))
        .route("/api/progress", get(progress))
        .route("/api/ranking", get(ranking))
        .route("/images/{image_id}", get(image));
    if let Some(dir) = &state.config.ui_dir {
        let index = ServeFile::new(dir.join("index.html"));
        app = app.fallback_service(ServeDir::new(dir).fallback(index));
    }
    app.with_state(state)
}

async fn next_query(State(app): State<Arc<AppState>>, Query(params): Query<NextParams>) -> Result<Response, ApiError> {
    let query = app.session().next_query(&AnnotatorId(params.annotator))?;
    let Some(q) = query else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let g = &app.graph;
    Ok(Json(QueryPayload {
        image_id: q.image.to_string(),
        image_url: format!("/images/{}", q.image),
        question_a: g.label_key(q.question_a).to_string(),
        question_b: g.label_key(q.question_b).to_string(),
        question_a_name: g.label_name(q.question_a).to_string(),
        question_b_name: g.label_name(q.question_b).to_string(),
    })
    .into_response())
}

async fn submit_vote(
    State(app): State<Arc<AppState>>,
    Json(req): Json<VoteRequest>,
) -> Result<Json<VoteResponse>, ApiError> {
    let vote = AnnotationVote {
        annotator: AnnotatorId(req.annotator),
        image: ImageId::new(&req.image_id),
        answer_a: req.answer_a,
        answer_b: req.answer_b,
        difficulty: req.difficulty,
    };
    let mut session = app.session();
    let ack = session.submit_vote(vote)?;
    let complete = session.state().is_complete();
    if complete && !ack.effect.finalized.is_empty() {
        if let Some(out) = &app.config.verdicts_out {
            let state = session.state();
            write_atomic(out, &format_verdicts(&state.verdicts(), state.models()))?;
        }
    }
    Ok(Json(VoteResponse { ack, complete }))
}

async fn progress(State(app): State<Arc<AppState>>) -> Json<Progress> {
    Json(app.session().progress())
}

async fn ranking(State(app): State<Arc<AppState>>) -> Result<Json<RankingPayload>, ApiError> {
    let snap = app.session().ranking_snapshot(app.config.rank)?;
    let s = &snap.state;
    let (rank, tied) = ordinal_ranks(&s.ranking.r);
    Ok(Json(RankingPayload {
        partial: snap.partial,
        models: s.models.iter().map(|m| m.0.clone()).collect(),
        r: s.ranking.r.clone(),
        rank,
        tied,
        eigenvalue: s.ranking.eigenvalue,
        accuracy: s.accuracy.rows().map(<[f64]>::to_vec).collect(),
        dominance: s.dominance.rows().map(<[f64]>::to_vec).collect(),
    }))
}

const IMAGE_TYPES: [(&str, &str); 6] = [
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("png", "image/png"),
    ("webp", "image/webp"),
    ("gif", "image/gif"),
    ("bmp", "image/bmp"),
];

fn find_image(dir: &Path, id: &str) -> Option<(PathBuf, &'static str)> {
    if id.is_empty() || id.starts_with('.') || id.contains(['/', '\\']) {
        return None;
    }
    IMAGE_TYPES
        .iter()
        .map(|(ext, mime)| (dir.join(format!("{id}.{ext}")), *mime))
        .chain(std::iter::once((dir.join(id), "application/octet-stream")))
        .find(|(p, _)| p.is_file())
}

async fn image(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let found = app.config.image_dir.as_deref().and_then(|d| find_image(d, &id));
    let Some((path, mime)) = found else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, mime)], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

fn write_atomic(path: &Path, contents: &str) -> mad_core::Result<()> {
    let tmp = path.with_extension("tmp");
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    std::fs::write(&tmp, contents).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
