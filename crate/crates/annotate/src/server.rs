use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;
use xicl_core::corpus::{Label, TaskKind};

use crate::eval_set::{EvalSet, LabelKind};
use crate::store::{RatingRecord, RatingStore, StoredId};
use crate::summary::summarize_ratings;
use crate::AnnotateError;

/// Header carrying the shared annotator token.
pub const TOKEN_HEADER: &str = "x-annotator-token";

#[derive(Clone)]
pub struct AppState {
    pub eval_set: Arc<EvalSet>,
    pub store: Arc<RatingStore>,
    pub token: Option<String>,
}

/// An item as the rating UI sees it: no NLE source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicItem {
    pub item_id: String,
    pub task: TaskKind,
    pub text_a: String,
    pub text_b: String,
    pub label: Label,
    pub label_kind: LabelKind,
    pub nle: String,
    pub source_hidden: bool,
    /// Latest score this annotator gave, if any.
    pub rated: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentPayload {
    pub annotator_id: String,
    pub total: usize,
    pub completed: usize,
    pub items: Vec<PublicItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub error: String,
    pub code: String,
}

impl IntoResponse for AnnotateError {
    fn into_response(self) -> Response {
        let (status, code) = match &self {
            AnnotateError::UnknownItem(_) | AnnotateError::UnknownAnnotator(_) => (StatusCode::NOT_FOUND, "not_found"),
            AnnotateError::NotAssigned { .. } => (StatusCode::FORBIDDEN, "not_assigned"),
            AnnotateError::InvalidReasons { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_reasons"),
            AnnotateError::InvalidScore(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_score"),
            AnnotateError::EmptyStore => (StatusCode::CONFLICT, "empty_store"),
            AnnotateError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = ErrorPayload {
            error: self.to_string(),
            code: code.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

async fn assignment(
    State(app): State<AppState>,
    Path(annotator): Path<String>,
) -> Result<Json<AssignmentPayload>, AnnotateError> {
    let a = app
        .eval_set
        .assignment(&annotator)
        .ok_or_else(|| AnnotateError::UnknownAnnotator(annotator.clone()))?;
    let state = app.store.snapshot();
    let items: Vec<PublicItem> = a
        .item_ids
        .iter()
        .filter_map(|id| app.eval_set.item(id))
        .map(|item| PublicItem {
            item_id: item.item_id.clone(),
            task: item.instance.task,
            text_a: item.instance.text_a.clone(),
            text_b: item.instance.text_b.clone(),
            label: item.label,
            label_kind: item.label_kind,
            nle: item.nle.clone(),
            source_hidden: true,
            rated: state
                .latest
                .get(&(item.item_id.clone(), annotator.clone()))
                .map(|r| r.score),
        })
        .collect();
    Ok(Json(AssignmentPayload {
        annotator_id: annotator,
        total: items.len(),
        completed: items.iter().filter(|i| i.rated.is_some()).count(),
        items,
    }))
}

async fn rating(
    State(app): State<AppState>,
    payload: Result<Json<RatingRecord>, JsonRejection>,
) -> Result<Json<StoredId>, AnnotateError> {
    let Json(record) = payload.map_err(|e| AnnotateError::BadRequest(e.body_text()))?;
    let store = app.store.clone();
    let set = app.eval_set.clone();
    // File appends block; keep them off the async workers.
    tokio::task::spawn_blocking(move || store.record(&set, record))
        .await
        .map_err(|e| AnnotateError::Io(e.to_string()))?
        .map(Json)
}

async fn summary(State(app): State<AppState>) -> Response {
    match summarize_ratings(&app.eval_set, &app.store.snapshot()) {
        Ok(s) => Json(s).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn require_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &app.token {
        let given = req
            .headers()
            .get(TOKEN_HEADER)
            .and_then(|v| v.to_str().ok())
            .or_else(|| {
                req.headers()
                    .get("authorization")
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.strip_prefix("Bearer "))
            });
        if given != Some(expected.as_str()) {
            let body = ErrorPayload {
                error: "missing or wrong annotator token".into(),
                code: "unauthorized".into(),
            };
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(req).await
}

/// `/api/*` routes, plus the UI bundle from `static_dir` for everything else.
pub fn router(app: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/assignment/{annotator}", get(assignment))
        .route("/api/rating", post(rating))
        .route("/api/summary", get(summary))
        .route_layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    pub eval_set: PathBuf,
    pub ratings_log: PathBuf,
    pub static_dir: Option<PathBuf>,
    /// Shared annotator token; when set every API call must present it.
    pub token: Option<String>,
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

/// Binds and serves until the listener fails or ctrl-c; snapshots the store on shutdown.
pub async fn serve(cfg: ServeConfig) -> Result<(), AnnotateError> {
    let eval_set = Arc::new(EvalSet::load(&cfg.eval_set)?);
    let store = Arc::new(RatingStore::open(&cfg.ratings_log)?);
    let app = AppState {
        eval_set,
        store: store.clone(),
        token: cfg.token.clone(),
    };
    let listener = tokio::net::TcpListener::bind(cfg.bind)
        .await
        .map_err(|e| AnnotateError::Io(format!("bind {}: {e}", cfg.bind)))?;
    tracing::info!("annotation service on http://{}", cfg.bind);
    axum::serve(listener, router(app, cfg.static_dir.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| AnnotateError::Io(e.to_string()))?;
    store.write_snapshot()
}
