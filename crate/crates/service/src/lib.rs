//! HTTP endpoint for filling blanks.
//!
//! | route             | body                          | answer                                   |
//! |-------------------|-------------------------------|------------------------------------------|
//! | `POST /v1/infill` | `{text, decode?, seed?}`      | `{completed_text, fills, diagnostics}`   |
//! | `GET /v1/health`  |                               | `{status, checkpoint_fingerprint, vocab_fingerprint}` |
//!
//! Errors are `{"error": <kind>, "message": <text>}` with status 400
//! (malformed JSON or marker, bad decode settings), 413 (text over the
//! character limit, or a prompt longer than the model context), 415 (not
//! `application/json`), or 503 (model still loading, or every generation
//! slot busy). The API keeps no state between requests: identical requests
//! produce identical response bytes.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use infill_core::infill::{complete, InfillError, InfillRequest};
use infill_core::model::{file_fingerprint, Checkpoint, DecodeConfig, ModelError, Transformer};
use infill_core::tokenizer::{TokenizerError, Vocab};

pub use infill_core::config::ServeConfig;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("invalid serve config: {0}")]
    Config(String),
    #[error("cannot load {}: {message}", path.display())]
    Load { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// The immutable model a process serves.
pub struct Loaded {
    pub model: Transformer<f32>,
    pub vocab: Vocab,
    /// Hex sha256 of the checkpoint file.
    pub checkpoint_fingerprint: String,
}

impl Loaded {
    pub fn from_files(checkpoint: &Path, vocab: &Path) -> Result<Self, ServeError> {
        let load_err = |path: &Path, e: &dyn std::fmt::Display| ServeError::Load { path: path.to_path_buf(), message: e.to_string() };
        let vocab = Vocab::load(vocab).map_err(|e| load_err(vocab, &e))?;
        let ckpt = Checkpoint::load(checkpoint).map_err(|e| load_err(checkpoint, &e))?;
        ckpt.verify_vocab(vocab.fingerprint())?;
        Ok(Self { model: ckpt.to_model()?, vocab, checkpoint_fingerprint: file_fingerprint(checkpoint)? })
    }
}

/// Shared handler state: settings, the model once loaded, and the
/// generation slots.
pub struct AppState {
    config: ServeConfig,
    loaded: OnceLock<Arc<Loaded>>,
    slots: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ServeConfig) -> Result<Arc<Self>, ServeError> {
        config.validate().map_err(|e| ServeError::Config(e.to_string()))?;
        let slots = Arc::new(Semaphore::new(config.max_concurrent));
        Ok(Arc::new(Self { config, loaded: OnceLock::new(), slots }))
    }

    pub fn config(&self) -> &ServeConfig {
        &self.config
    }

    /// Install the model. Only the first call has an effect.
    pub fn set_loaded(&self, loaded: Loaded) {
        let _ = self.loaded.set(Arc::new(loaded));
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded.get().is_some()
    }

    /// The semaphore that caps concurrent generations.
    pub fn slots(&self) -> &Arc<Semaphore> {
        &self.slots
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
}

fn error(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    json_response(status, &ErrorBody { error: kind, message: message.into() })
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    let bytes = serde_json::to_vec(body).expect("response serializes");
    (status, [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], bytes).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRequest {
    text: String,
    /// Parsed separately so bad settings report as `invalid_decode`.
    #[serde(default)]
    decode: Option<serde_json::Value>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Health<'a> {
    status: &'a str,
    checkpoint_fingerprint: Option<&'a str>,
    vocab_fingerprint: Option<&'a str>,
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.loaded.get() {
        Some(l) => json_response(
            StatusCode::OK,
            &Health {
                status: "ok",
                checkpoint_fingerprint: Some(&l.checkpoint_fingerprint),
                vocab_fingerprint: Some(l.vocab.fingerprint()),
            },
        ),
        None => json_response(
            StatusCode::SERVICE_UNAVAILABLE,
            &Health { status: "loading", checkpoint_fingerprint: None, vocab_fingerprint: None },
        ),
    }
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.split(';').next())
        .is_some_and(|m| m.trim().eq_ignore_ascii_case("application/json"))
}

fn infill_error(e: InfillError) -> Response {
    match e {
        InfillError::MalformedMarker { .. } => error(StatusCode::BAD_REQUEST, "malformed_marker", e.to_string()),
        InfillError::Tokenizer(TokenizerError::UnknownSpecialInText(_)) => {
            error(StatusCode::BAD_REQUEST, "reserved_token", e.to_string())
        }
        InfillError::ContextOverflow { .. } => error(StatusCode::PAYLOAD_TOO_LARGE, "context_overflow", e.to_string()),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
    }
}

async fn infill(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    if !is_json(&headers) {
        return error(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_media_type", "content type must be application/json");
    }
    let wire: WireRequest = match serde_json::from_slice(&body) {
        Ok(w) => w,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_json", e.to_string()),
    };
    let limit = state.config.max_text_chars;
    let chars = wire.text.chars().count();
    if chars > limit {
        return error(StatusCode::PAYLOAD_TOO_LARGE, "text_too_long", format!("text has {chars} characters, limit is {limit}"));
    }
    let decode = match wire.decode.map(serde_json::from_value::<DecodeConfig>) {
        None => state.config.decode.clone(),
        Some(Ok(d)) => d,
        Some(Err(e)) => return error(StatusCode::BAD_REQUEST, "invalid_decode", e.to_string()),
    };
    if let Err(e) = decode.validate() {
        return error(StatusCode::BAD_REQUEST, "invalid_decode", e.to_string());
    }
    let budget = state.config.max_new_tokens;
    if decode.max_new_tokens > budget {
        return error(
            StatusCode::BAD_REQUEST,
            "invalid_decode",
            format!("max_new_tokens {} exceeds the budget of {budget}", decode.max_new_tokens),
        );
    }
    let Some(loaded) = state.loaded.get().cloned() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "loading", "model is still loading");
    };
    let Ok(permit) = state.slots.clone().try_acquire_owned() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "at_capacity", "all generation slots are busy");
    };
    let request = InfillRequest { text: wire.text, decode, seed: wire.seed };
    let result = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        complete(&loaded.model, &loaded.vocab, &request)
    })
    .await;
    match result {
        Ok(Ok(r)) => json_response(StatusCode::OK, &r),
        Ok(Err(e)) => infill_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

fn cors(origin: &str) -> CorsLayer {
    let allow = if origin == "*" {
        AllowOrigin::any()
    } else {
        AllowOrigin::exact(HeaderValue::from_str(origin).unwrap_or(HeaderValue::from_static("null")))
    };
    CorsLayer::new().allow_origin(allow).allow_methods([Method::GET, Method::POST]).allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: Arc<AppState>) -> Router {
    // JSON escaping can grow text up to six bytes per character.
    let body_limit = state.config.max_text_chars * 6 + 64 * 1024;
    let origin = state.config.cors_origin.clone();
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/infill", post(infill))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(cors(&origin))
        .with_state(state)
}

/// Serve until `shutdown` resolves. The model loads in the background; the
/// health route answers 503 until it is ready, and a failed load stops the
/// server with its error.
pub async fn serve(
    config: ServeConfig,
    checkpoint: PathBuf,
    vocab: PathBuf,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    on_ready: impl FnOnce(std::net::SocketAddr) + Send,
) -> Result<(), ServeError> {
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(&state.config.bind).await?;
    on_ready(listener.local_addr()?);
    let app = router(state.clone());
    let mut server = tokio::spawn(async move { axum::serve(listener, app).with_graceful_shutdown(shutdown).await });
    let loading = tokio::task::spawn_blocking(move || Loaded::from_files(&checkpoint, &vocab));
    let joined = |r: Result<std::io::Result<()>, tokio::task::JoinError>| match r {
        Ok(r) => r.map_err(ServeError::from),
        Err(e) => Err(ServeError::Io(std::io::Error::other(e))),
    };
    tokio::select! {
        r = &mut server => return joined(r),
        loaded = loading => {
            let loaded = loaded.map_err(|e| ServeError::Io(std::io::Error::other(e)))??;
            state.set_loaded(loaded);
        }
    }
    joined(server.await)
}
