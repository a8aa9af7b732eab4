use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use utg_core::pipeline::{image_png, GenParams, Label};
use utg_core::{RarityParams, ThresholdParam};

use crate::models::{self, Loaded, ModelError};
use crate::store::{BatchInfo, Mode, Store, StoreError};

/// Largest batch one request may ask for.
pub const MAX_BATCH: usize = 10_000;

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => ApiError(StatusCode::NOT_FOUND, e.to_string()),
            _ => ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Missing(m) => ApiError(StatusCode::NOT_FOUND, m),
            ModelError::Mismatch(m) => ApiError(StatusCode::UNPROCESSABLE_ENTITY, m),
            ModelError::Core(utg_core::Error::InvalidParam(m)) => ApiError(StatusCode::UNPROCESSABLE_ENTITY, m),
            ModelError::Core(e) => ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
}

type ApiResult<T> = Result<T, ApiError>;

/// Shared service state.
pub struct AppState {
    store: Store,
    models: Mutex<HashMap<String, Arc<Loaded>>>,
    in_flight: Mutex<HashSet<String>>,
    writes: Mutex<()>,
}

/// Marks a session as generating until dropped.
pub struct GenerationGuard {
    state: Arc<AppState>,
    id: String,
}

impl Drop for GenerationGuard {
    fn drop(&mut self) {
        self.state.in_flight.lock().expect("lock").remove(&self.id);
    }
}

impl AppState {
    pub fn new(store: Store) -> Arc<Self> {
        Arc::new(AppState {
            store,
            models: Mutex::new(HashMap::new()),
            in_flight: Mutex::new(HashSet::new()),
            writes: Mutex::new(()),
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Claims the session's generation slot, or `None` while one is running.
    pub fn try_begin_generation(self: &Arc<Self>, id: &str) -> Option<GenerationGuard> {
        let mut set = self.in_flight.lock().expect("lock");
        if !set.insert(id.to_owned()) {
            return None;
        }
        Some(GenerationGuard {
            state: Arc::clone(self),
            id: id.to_owned(),
        })
    }
}

async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    F: FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    let st = Arc::clone(state);
    tokio::task::spawn_blocking(move || f(&st))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/params", patch(update_params))
        .route("/sessions/{id}/batches", post(generate_batch))
        .route("/sessions/{id}/batches/{bid}", get(get_batch))
        .route("/sessions/{id}/batches/{bid}/samples/{sid}/image", get(sample_image))
        .route("/sessions/{id}/batches/{bid}/samples/{sid}/label", post(label_sample))
        .route("/sessions/{id}/export", get(export_session))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    let text = if body.iter().all(u8::is_ascii_whitespace) { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| unprocessable(format!("invalid request body: {e}")))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    mode: Mode,
    #[serde(default, alias = "vae")]
    model: Option<String>,
    #[serde(default)]
    vq: Option<String>,
    #[serde(default)]
    prior: Option<String>,
    #[serde(default)]
    data: Option<String>,
}

fn default_params(mode: Mode) -> GenParams {
    match mode {
        Mode::VaeTabular => GenParams::Rarity(RarityParams::baseline()),
        Mode::VqvaeImage => GenParams::Threshold(ThresholdParam::identity()),
    }
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateRequest = parse_body(&body)?;
    let session = blocking(&state, move |st| {
        let (refs, loaded) = models::resolve(
            req.mode,
            req.model.as_deref(),
            req.vq.as_deref(),
            req.prior.as_deref(),
            req.data.as_deref(),
        )?;
        let _w = st.writes.lock().expect("lock");
        let s = st.store.create_session(req.mode, refs, default_params(req.mode))?;
        st.models.lock().expect("lock").insert(s.id.clone(), Arc::new(loaded));
        Ok(s)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> ApiResult<impl IntoResponse> {
    let list = blocking(&state, |st| Ok(st.store.list_sessions()?)).await?;
    Ok(Json(json!({ "sessions": list })))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&state, move |st| Ok(st.store.get_session(&id)?)).await?))
}

/// Parses and validates parameters for a session mode.
pub fn params_for_mode(mode: Mode, value: &serde_json::Value) -> ApiResult<GenParams> {
    let obj = value.as_object().ok_or_else(|| unprocessable("params must be a JSON object"))?;
    let num = |k: &str| -> ApiResult<f64> {
        obj.get(k)
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| unprocessable(format!("missing numeric field {k:?}")))
    };
    let p = match mode {
        Mode::VaeTabular => {
            if obj.keys().any(|k| k != "mu_u" && k != "sigma_u") {
                return Err(unprocessable("tabular sessions take mu_u and sigma_u"));
            }
            GenParams::Rarity(RarityParams::new(num("mu_u")?, num("sigma_u")?).map_err(|e| unprocessable(e.to_string()))?)
        }
        Mode::VqvaeImage => {
            if obj.keys().any(|k| k != "t") {
                return Err(unprocessable("image sessions take t"));
            }
            GenParams::Threshold(ThresholdParam::new(num("t")?).map_err(|e| unprocessable(e.to_string()))?)
        }
    };
    Ok(p)
}

async fn update_params(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let value: serde_json::Value = parse_body(&body)?;
    let session = blocking(&state, move |st| {
        let _w = st.writes.lock().expect("lock");
        let mut s = st.store.get_session(&id)?;
        s.params = params_for_mode(s.mode, &value)?;
        s.updated = crate::store::now();
        st.store.save_session(&s)?;
        Ok(s)
    })
    .await?;
    Ok(Json(session))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    #[serde(default = "default_n")]
    n: usize,
    #[serde(default)]
    seed: Option<u64>,
}

fn default_n() -> usize {
    100
}

fn session_models(st: &AppState, id: &str, mode: Mode, refs: &crate::store::ModelRefs) -> ApiResult<Arc<Loaded>> {
    if let Some(m) = st.models.lock().expect("lock").get(id) {
        return Ok(Arc::clone(m));
    }
    let loaded = Arc::new(models::load(mode, refs)?);
    st.models.lock().expect("lock").insert(id.to_owned(), Arc::clone(&loaded));
    Ok(loaded)
}

async fn generate_batch(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: GenerateRequest = parse_body(&body)?;
    if req.n > MAX_BATCH {
        return Err(unprocessable(format!("n must be <= {MAX_BATCH}")));
    }
    let session = {
        let id = id.clone();
        blocking(&state, move |st| Ok(st.store.get_session(&id)?)).await?
    };
    let guard = state
        .try_begin_generation(&id)
        .ok_or_else(|| ApiError(StatusCode::CONFLICT, format!("session {id} is already generating")))?;
    let batch = blocking(&state, move |st| {
        let _guard = guard;
        let loaded = session_models(st, &session.id, session.mode, &session.models)?;
        let seed = req.seed.unwrap_or(session.batches.len() as u64);
        let records = loaded.generate(session.params, req.n, seed)?;
        let _w = st.writes.lock().expect("lock");
        // params may have changed while generating; the batch keeps the snapshot it used
        let mut current = st.store.get_session(&session.id)?;
        let info = BatchInfo {
            id: Store::next_batch_id(&current),
            params: session.params,
            seed,
            n: req.n,
            created: crate::store::now(),
        };
        Ok(st.store.append_batch(&mut current, info, records)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(batch)))
}

async fn get_batch(
    State(state): State<Arc<AppState>>,
    Path((id, bid)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(&state, move |st| Ok(st.store.get_batch(&id, &bid)?)).await?))
}

fn sample_id(sid: &str) -> ApiResult<u64> {
    sid.parse()
        .map_err(|_| ApiError(StatusCode::NOT_FOUND, format!("sample {sid:?} not found")))
}

async fn sample_image(
    State(state): State<Arc<AppState>>,
    Path((id, bid, sid)): Path<(String, String, String)>,
) -> ApiResult<impl IntoResponse> {
    let rid = sample_id(&sid)?;
    let png = blocking(&state, move |st| {
        let rec = st.store.get_record(&id, &bid, rid)?;
        image_png(&rec.values).map_err(|_| ApiError(StatusCode::NOT_FOUND, format!("sample {rid} has no image")))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    label: String,
    #[serde(default)]
    note: Option<String>,
}

async fn label_sample(
    State(state): State<Arc<AppState>>,
    Path((id, bid, sid)): Path<(String, String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let rid = sample_id(&sid)?;
    let req: LabelRequest = parse_body(&body)?;
    let label: Label = req.label.parse().map_err(|e: utg_core::Error| unprocessable(e.to_string()))?;
    let rec = blocking(&state, move |st| {
        let _w = st.writes.lock().expect("lock");
        Ok(st.store.label_record(&id, &bid, rid, label, req.note)?)
    })
    .await?;
    Ok(Json(rec))
}

async fn export_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let body = blocking(&state, move |st| Ok(st.store.export(&id)?)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}
