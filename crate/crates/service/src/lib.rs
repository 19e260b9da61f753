//! HTTP+JSON session API for interactive incremental generation.
//!
//! A session owns a growing scene graph. Clients add objects and relations,
//! then ask for a step: the pending objects are generated on top of the
//! previous image and become locked. Sessions live in a directory store and
//! survive restarts.
//!
//! | Method | Path | Result |
//! |---|---|---|
//! | GET | `/healthz` | `{status, checkpoint}` |
//! | GET | `/v1/vocabulary` | categories and predicates |
//! | POST | `/v1/sessions` | `{session_id}` |
//! | GET | `/v1/sessions/{id}` | full session view |
//! | POST | `/v1/sessions/{id}/graph` | graph view after the edit |
//! | POST | `/v1/sessions/{id}/step` | `{step_index, new_node_ids, image_url}` |
//! | GET | `/v1/sessions/{id}/images/{k}` | PNG |

pub mod error;
pub mod session;
pub mod store;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use isggen_core::imageio::encode_png;
use isggen_core::seed::step_seed;
use isggen_core::trainer::{generate_step, Checkpoint, Model};
use isggen_core::{Tensor, Var};

pub use error::{ApiError, ApiResult, ErrorBody};
pub use session::{EdgeView, GraphEdit, GraphView, NewNode, Session, SessionView, StepView};
pub use store::SessionStore;

/// Shared, read-only model plus the session store.
#[derive(Clone)]
pub struct AppState {
    model: Arc<Model>,
    checkpoint_id: String,
    store: SessionStore,
}

impl AppState {
    pub fn new(model: Model, checkpoint_id: impl Into<String>, store: SessionStore) -> Self {
        Self { model: Arc::new(model), checkpoint_id: checkpoint_id.into(), store }
    }

    /// Load a checkpoint archive; its id is a prefix of the file's SHA-256.
    pub fn from_checkpoint(path: &Path, store: SessionStore) -> isggen_core::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| isggen_core::Error::io(path, e))?;
        let id = hex::encode(&Sha256::digest(&bytes)[..8]);
        let model = Checkpoint::from_bytes(&bytes)?.restore_model()?;
        Ok(Self::new(model, id, store))
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/vocabulary", get(vocabulary))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/graph", post(edit_graph))
        .route("/v1/sessions/{id}/step", post(step))
        .route("/v1/sessions/{id}/images/{k}", get(image))
        .fallback(|| async { ApiError::not_found("not_found", "no such route") })
        .with_state(state)
}

/// Serve until `shutdown` resolves. Every write completes before its
/// response is sent, so nothing is left to flush afterwards.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.inner().to_string())
            .with_detail(json!({ "path": e.path().to_string() }))
    })
}

async fn healthz(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint": s.checkpoint_id }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VocabularyView {
    pub version: String,
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
}

async fn vocabulary(State(s): State<AppState>) -> Json<VocabularyView> {
    let v = &s.model.config.vocabulary;
    Json(VocabularyView { version: v.version(), categories: v.categories().to_vec(), predicates: v.predicates().to_vec() })
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    /// Seeds the per-step noise; random when absent.
    pub seed: Option<u64>,
    /// Must name the served checkpoint when given.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

async fn create_session(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let req: CreateSession = parse_body(&body)?;
    if let Some(c) = req.checkpoint.filter(|c| *c != s.checkpoint_id) {
        return Err(ApiError::not_found("unknown_checkpoint", format!("checkpoint `{c}` is not served here"))
            .with_detail(json!({ "available": [s.checkpoint_id] })));
    }
    let mut rng = rand::rng();
    let id = format!("{:032x}", rng.random::<u128>());
    let session = Session::new(id.clone(), s.checkpoint_id.clone(), req.seed.unwrap_or_else(|| rng.random()));
    s.store.create(&session)?;
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn get_session(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    Ok(Json(s.store.load(&id)?.view(&s.model.config.vocabulary)))
}

async fn edit_graph(State(s): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<GraphView>> {
    let edit: GraphEdit = parse_body(&body)?;
    let lock = s.store.lock(&id);
    let _guard = lock.lock().await;
    let mut session = s.store.load(&id)?;
    session.graph = session.apply(&edit, &s.model.config.vocabulary)?;
    s.store.save(&session)?;
    Ok(Json(session.graph_view(&s.model.config.vocabulary)))
}

/// Generate the pending nodes of a session's graph. This is the exact
/// computation of one incremental rollout step.
pub fn run_step(model: &Model, session: &Session, previous: Option<&Tensor>) -> isggen_core::Result<(BTreeSet<isggen_core::NodeId>, Tensor)> {
    let p = model.gen_params.bind(false);
    let previous = previous.map(|t| Var::constant(t.clone()));
    let k = session.steps.len();
    let out = generate_step(model, &p, &session.graph, &session.generated, previous.as_ref(), step_seed(session.seed, k), None, false)?;
    Ok((out.new_node_ids, out.image.value().clone()))
}

async fn step(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<StepView>> {
    let lock = s.store.lock(&id);
    let _guard = lock.lock().await;
    let mut session = s.store.load(&id)?;
    if session.checkpoint != s.checkpoint_id {
        return Err(ApiError::not_found("unknown_checkpoint", format!("session uses checkpoint `{}`, which is not served here", session.checkpoint))
            .with_detail(json!({ "available": [s.checkpoint_id] })));
    }
    if session.pending().is_empty() {
        return Err(ApiError::conflict("nothing_to_generate", "the graph has no pending nodes"));
    }
    let k = session.steps.len();
    let previous = match k {
        0 => None,
        _ => Some(s.store.read_raw_image(&id, k - 1)?),
    };
    let model = s.model.clone();
    let snapshot = session.clone();
    let (new_ids, image) = tokio::task::spawn_blocking(move || run_step(&model, &snapshot, previous.as_ref()))
        .await
        .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))??;

    let png = encode_png(&image)?;
    s.store.write_raw_image(&id, k, &image)?;
    s.store.write_image(&id, k, &png)?;
    session.generated.extend(new_ids.iter().copied());
    session.steps.push(session::StepRecord { step_index: k, new_node_ids: new_ids.into_iter().collect() });
    s.store.save(&session)?;
    Ok(Json(session.step_view(&session.steps[k])))
}

async fn image(State(s): State<AppState>, UrlPath((id, k)): UrlPath<(String, String)>) -> ApiResult<impl IntoResponse> {
    let session = s.store.load(&id)?;
    let missing = || ApiError::not_found("image_not_found", format!("session `{id}` has no image {k}"));
    let k: usize = k.parse().map_err(|_| missing())?;
    if k >= session.steps.len() {
        return Err(missing());
    }
    let png = s.store.read_image(&id, k)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}
