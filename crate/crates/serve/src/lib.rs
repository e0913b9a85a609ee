//! HTTP front end for one trained checkpoint.
//!
//! | route | purpose |
//! |---|---|
//! | `GET /api/health` | model name and checkpoint digest once loaded |
//! | `GET /api/classes` | output class names in column order |
//! | `POST /api/predict` | multipart `image` → class probabilities |
//! | `POST /api/explain?method=M` | multipart `image` (+ `params`, `class`) → saliency map and overlay |
//!
//! Failures answer with `{"error_code": ..., "message": ...}`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use octclass_core::data::{argmax_f64, decode_image_bytes};
use octclass_core::models::{checkpoint_digest, load_checkpoint, ModelHandle};
use octclass_core::xai::{encode_png, explain, to_rgb_image, ExplainRequest, Method};
use octclass_core::{ClassLabel, Error, IMAGE_SIZE};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;

/// Slack on top of the image limit for multipart headers and small fields.
const FORM_OVERHEAD_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub host: String,
    pub port: u16,
    pub explain_timeout: Duration,
    pub max_upload_bytes: usize,
    pub max_concurrent_explains: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            checkpoint: PathBuf::from("checkpoint.json"),
            host: "127.0.0.1".into(),
            port: 8080,
            explain_timeout: Duration::from_secs(60),
            max_upload_bytes: 10 * 1024 * 1024,
            max_concurrent_explains: 2,
        }
    }
}

pub struct LoadedModel {
    pub model: ModelHandle,
    pub digest: String,
}

struct Inner {
    model: OnceLock<Arc<LoadedModel>>,
    load_error: Mutex<Option<String>>,
    explain_slots: Arc<Semaphore>,
    explain_timeout: Duration,
    max_upload_bytes: usize,
}

/// Shared handler state. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// State with no model yet; every model-backed route answers 503 until
    /// [`AppState::set_model`] or [`AppState::load_checkpoint`] succeeds.
    pub fn new(config: &ServiceConfig) -> AppState {
        AppState {
            inner: Arc::new(Inner {
                model: OnceLock::new(),
                load_error: Mutex::new(None),
                explain_slots: Arc::new(Semaphore::new(config.max_concurrent_explains.max(1))),
                explain_timeout: config.explain_timeout,
                max_upload_bytes: config.max_upload_bytes,
            }),
        }
    }

    pub fn with_model(config: &ServiceConfig, model: ModelHandle, digest: impl Into<String>) -> AppState {
        let state = AppState::new(config);
        state.set_model(model, digest);
        state
    }

    /// Returns false if a model was already installed.
    pub fn set_model(&self, model: ModelHandle, digest: impl Into<String>) -> bool {
        let loaded = Arc::new(LoadedModel {
            model,
            digest: digest.into(),
        });
        self.inner.model.set(loaded).is_ok()
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.inner.model.get().cloned()
    }

    /// Blocking load; the failure reason is kept for `/api/health`.
    pub fn load_checkpoint(&self, path: &Path) -> octclass_core::Result<()> {
        let result = load_checkpoint(path).and_then(|m| Ok((m, checkpoint_digest(path)?)));
        match result {
            Ok((model, digest)) => {
                log::info!("loaded {} from {} (sha256 {digest})", model.name(), path.display());
                self.set_model(model, digest);
                Ok(())
            }
            Err(e) => {
                log::error!("failed to load {}: {e}", path.display());
                *self.inner.load_error.lock().unwrap() = Some(e.to_string());
                Err(e)
            }
        }
    }

    pub fn spawn_load(&self, path: PathBuf) -> tokio::task::JoinHandle<()> {
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let _ = state.load_checkpoint(&path);
        })
    }

    fn require_model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model().ok_or_else(|| {
            let message = match self.inner.load_error.lock().unwrap().as_ref() {
                Some(e) => format!("model failed to load: {e}"),
                None => "model is still loading".to_string(),
            };
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ModelNotLoaded", message)
        })
    }
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn too_large(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "TooLarge", message)
    }

    fn internal(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "InternalError", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::DecodeError { .. } => ApiError::bad_request("DecodeError", message),
            Error::InvalidXaiConfig(_)
            | Error::IndexOutOfRange { .. }
            | Error::UnknownLayer(_)
            | Error::NonSpatialLayer { .. }
            | Error::InvalidSegmentCount(_) => ApiError::bad_request("BadParams", message),
            _ => ApiError::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error_code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_name: String,
    pub checkpoint_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub top_class: String,
    pub confidence: f64,
    /// Keyed by class name; names sort in column order.
    pub probabilities: BTreeMap<String, f64>,
    pub model_name: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub method: String,
    pub target_class: String,
    pub class_probability: f64,
    /// Base64 PNG, 224×224 RGB.
    pub overlay_image: String,
    /// Row-major, values in `[0, 1]`.
    pub raw_map: Vec<Vec<f64>>,
    pub params: Value,
    pub model_name: String,
    pub latency_ms: f64,
}

pub fn router(state: AppState) -> Router {
    let body_limit = state.inner.max_upload_bytes.saturating_add(FORM_OVERHEAD_BYTES);
    Router::new()
        .route("/api/health", get(health))
        .route("/api/classes", get(classes))
        .route("/api/predict", post(predict))
        .route("/api/explain", post(explain_route))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds, starts the checkpoint load in the background and serves until
/// ctrl-c.
pub async fn run(config: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(&config);
    state.spawn_load(config.checkpoint.clone());
    let listener = TcpListener::bind((config.host.as_str(), config.port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route")
}

async fn method_not_allowed() -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed", "method not allowed on this route")
}

async fn health(State(state): State<AppState>) -> Result<Json<HealthResponse>, ApiError> {
    let loaded = state.require_model()?;
    Ok(Json(HealthResponse {
        status: "ok".into(),
        model_name: loaded.model.name().to_string(),
        checkpoint_digest: loaded.digest.clone(),
    }))
}

async fn classes(State(state): State<AppState>) -> Result<Json<Vec<&'static str>>, ApiError> {
    let loaded = state.require_model()?;
    Ok(Json(loaded.model.class_order().iter().map(|c| c.name()).collect()))
}

#[derive(Default)]
struct Upload {
    image: Option<Vec<u8>>,
    params: Option<String>,
    class: Option<String>,
}

async fn read_form(form: Result<Multipart, MultipartRejection>, limit: usize) -> Result<Upload, ApiError> {
    let mut form = form.map_err(|e| ApiError::bad_request("BadMultipart", e.body_text()))?;
    let mut upload = Upload::default();
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(multipart_error(e)),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(multipart_error)?;
        match name.as_str() {
            "image" | "file" => {
                if bytes.len() > limit {
                    return Err(ApiError::too_large(format!("image is {} bytes; limit is {limit}", bytes.len())));
                }
                upload.image = Some(bytes.to_vec());
            }
            "params" => upload.params = Some(text_field("params", &bytes)?),
            "class" => upload.class = Some(text_field("class", &bytes)?),
            other => log::debug!("ignoring form field {other:?}"),
        }
    }
    Ok(upload)
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::too_large(e.body_text())
    } else {
        ApiError::bad_request("BadMultipart", e.body_text())
    }
}

fn text_field(name: &str, bytes: &[u8]) -> Result<String, ApiError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::bad_request("BadParams", format!("field {name:?} is not UTF-8")))
}

fn require_image(upload: &mut Upload) -> Result<Vec<u8>, ApiError> {
    upload
        .image
        .take()
        .ok_or_else(|| ApiError::bad_request("MissingImage", "multipart field \"image\" is required"))
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

async fn predict(
    State(state): State<AppState>,
    form: Result<Multipart, MultipartRejection>,
) -> Result<Json<PredictionResponse>, ApiError> {
    let start = Instant::now();
    let loaded = state.require_model()?;
    let mut upload = read_form(form, state.inner.max_upload_bytes).await?;
    let bytes = require_image(&mut upload)?;
    let worker = loaded.clone();
    let probs = tokio::task::spawn_blocking(move || -> octclass_core::Result<Vec<f64>> {
        let image = decode_image_bytes(&bytes, "upload")?;
        worker.model.predict(&image)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;

    let names = loaded.model.class_order();
    let top = argmax_f64(&probs);
    Ok(Json(PredictionResponse {
        top_class: names[top].name().to_string(),
        confidence: probs[top],
        probabilities: names.iter().zip(&probs).map(|(c, &p)| (c.name().to_string(), p)).collect(),
        model_name: loaded.model.name().to_string(),
        latency_ms: elapsed_ms(start),
    }))
}

fn parse_class(text: &str, classes: usize) -> Result<usize, ApiError> {
    let text = text.trim();
    let index = match text.parse::<usize>() {
        Ok(i) => i,
        Err(_) => ClassLabel::from_name(text)
            .map(ClassLabel::index)
            .ok_or_else(|| ApiError::bad_request("BadParams", format!("unknown class {text:?}")))?,
    };
    if index >= classes {
        return Err(ApiError::bad_request(
            "BadParams",
            format!("class {text:?} is outside this model's {classes} outputs"),
        ));
    }
    Ok(index)
}

async fn explain_route(
    State(state): State<AppState>,
    Query(query): Query<HashMap<String, String>>,
    form: Result<Multipart, MultipartRejection>,
) -> Result<Json<ExplainResponse>, ApiError> {
    let start = Instant::now();
    let method_name = query
        .get("method")
        .ok_or_else(|| ApiError::bad_request("UnknownMethod", "query parameter \"method\" is required"))?;
    let method: Method = method_name
        .parse()
        .map_err(|_| ApiError::bad_request("UnknownMethod", format!("unknown method {method_name:?}; expected gradcam, lime or occlusion")))?;
    let loaded = state.require_model()?;
    let mut upload = read_form(form, state.inner.max_upload_bytes).await?;
    let bytes = require_image(&mut upload)?;

    let params: Option<Value> = match upload.params.as_deref().map(str::trim) {
        None | Some("") => None,
        Some(text) => Some(
            serde_json::from_str(text).map_err(|e| ApiError::bad_request("BadParams", format!("params is not valid JSON: {e}")))?,
        ),
    };
    let request = ExplainRequest::from_params(method, params.as_ref())
        .map_err(|e| ApiError::bad_request("BadParams", e.to_string()))?;
    let classes = loaded.model.class_order().len();
    let class = match query.get("class").or(upload.class.as_ref()) {
        Some(text) => Some(parse_class(text, classes)?),
        None => None,
    };

    let budget = state.inner.explain_timeout;
    let slots = state.inner.explain_slots.clone();
    let worker = loaded.clone();
    let job = async move {
        let permit = slots.acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?;
        tokio::task::spawn_blocking(move || -> Result<ExplainResponse, ApiError> {
            // A timed-out job keeps its slot until it finishes.
            let _permit = permit;
            let image = decode_image_bytes(&bytes, "upload")?;
            let result = explain(&worker.model, &image, &request, class)?;
            let png = encode_png(&to_rgb_image(&result.overlay, IMAGE_SIZE, IMAGE_SIZE))?;
            let map = &result.map;
            Ok(ExplainResponse {
                method: map.method.as_str().to_string(),
                target_class: worker.model.class_order()[map.target_class].name().to_string(),
                class_probability: result.class_probability,
                overlay_image: base64::engine::general_purpose::STANDARD.encode(png),
                raw_map: map.values.chunks(map.width).map(<[f64]>::to_vec).collect(),
                params: result.params.clone(),
                model_name: worker.model.name().to_string(),
                latency_ms: 0.0,
            })
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
    };
    let mut response = tokio::time::timeout(budget, job).await.map_err(|_| {
        ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            "ExplainTimeout",
            format!("{method_name} explanation exceeded {:.1} s", budget.as_secs_f64()),
        )
    })??;
    response.latency_ms = elapsed_ms(start);
    Ok(Json(response))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_parsing_accepts_names_and_indices() {
        assert_eq!(parse_class("DRUSEN", 8).unwrap(), 5);
        assert_eq!(parse_class("drusen", 8).unwrap(), 5);
        assert_eq!(parse_class("3", 8).unwrap(), 3);
        assert_eq!(parse_class("NORMAL", 3).unwrap_err().code, "BadParams");
        assert_eq!(parse_class("glaucoma", 8).unwrap_err().code, "BadParams");
    }

    #[test]
    fn core_errors_map_to_status_codes() {
        let e: ApiError = Error::DecodeError {
            path: "x".into(),
            reason: "bad".into(),
        }
        .into();
        assert_eq!((e.status, e.code), (StatusCode::BAD_REQUEST, "DecodeError"));
        let e: ApiError = Error::InvalidXaiConfig("x".into()).into();
        assert_eq!(e.code, "BadParams");
        let e: ApiError = Error::ShapeMismatch("x".into()).into();
        assert_eq!(e.status, StatusCode::INTERNAL_SERVER_ERROR);
    }
}
