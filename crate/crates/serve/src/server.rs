use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use stagerank_core::biencoder::{Embedder, EmbedderModel, LocalEmbedder, TextRole};
use stagerank_core::checkpoint::Checkpoint;
use stagerank_core::crossencoder::{cmp_score_desc, LocalReranker, RerankerModel, Reranker};
use stagerank_core::error::{Error, Result};
use stagerank_core::tokenizer::Vocab;
use tokio::net::TcpListener;

use crate::api::*;

pub const MAX_PASSAGES: usize = 512;
pub const MAX_TEXT_CHARS: usize = 16 * 1024;
const BODY_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFiles {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default)]
    pub embedder: Option<ModelFiles>,
    #[serde(default)]
    pub reranker: Option<ModelFiles>,
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Environment variable holding the bearer token; no auth when unset.
    #[serde(default)]
    pub token_env: Option<String>,
}

fn default_host() -> String {
    "127.0.0.1".into()
}
fn default_port() -> u16 {
    8080
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { embedder: None, reranker: None, host: default_host(), port: default_port(), token_env: None }
    }
}

#[derive(Default)]
pub struct Metrics {
    pub embedding_requests: AtomicU64,
    pub ranking_requests: AtomicU64,
    pub errors: AtomicU64,
}

pub struct AppState {
    pub embedder: Option<Arc<dyn Embedder>>,
    pub reranker: Option<Arc<dyn Reranker>>,
    pub token: Option<String>,
    pub metrics: Metrics,
}

impl AppState {
    pub fn new(embedder: Option<Arc<dyn Embedder>>, reranker: Option<Arc<dyn Reranker>>) -> Self {
        Self { embedder, reranker, token: None, metrics: Metrics::default() }
    }
}

/// Loads every configured model; called before any port is bound.
pub fn load_state(cfg: &ServeConfig) -> Result<AppState> {
    let embedder = match &cfg.embedder {
        Some(files) => {
            let model = EmbedderModel::<f64>::from_checkpoint(&Checkpoint::load(&files.checkpoint)?)?;
            Some(Arc::new(LocalEmbedder::new(model, Vocab::load(&files.vocab)?)) as Arc<dyn Embedder>)
        }
        None => None,
    };
    let reranker = match &cfg.reranker {
        Some(files) => {
            let model = RerankerModel::<f64>::from_checkpoint(&Checkpoint::load(&files.checkpoint)?)?;
            Some(Arc::new(LocalReranker::new(model, Vocab::load(&files.vocab)?)) as Arc<dyn Reranker>)
        }
        None => None,
    };
    if embedder.is_none() && reranker.is_none() {
        return Err(Error::Config("serve needs an embedder or a reranker".into()));
    }
    let token = match &cfg.token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?),
        None => None,
    };
    Ok(AppState { embedder, reranker, token, metrics: Metrics::default() })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/embeddings", post(embeddings))
        .route("/v1/ranking", post(ranking))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves until the listener fails or ctrl-c is received.
pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    let addr: SocketAddr = listener.local_addr()?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Binds an ephemeral localhost port and serves from a background thread
/// with its own runtime. Returns once the port is bound.
pub fn serve_in_background(state: AppState) -> std::io::Result<SocketAddr> {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let runtime = match tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build() {
            Ok(rt) => rt,
            Err(e) => return tx.send(Err(e)).unwrap_or(()),
        };
        runtime.block_on(async move {
            let listener = match TcpListener::bind("127.0.0.1:0").await {
                Ok(l) => l,
                Err(e) => return tx.send(Err(e)).unwrap_or(()),
            };
            let _ = tx.send(listener.local_addr());
            if let Err(e) = axum::serve(listener, router(Arc::new(state))).await {
                log::error!("background server stopped: {e}");
            }
        });
    });
    rx.recv().map_err(|e| std::io::Error::other(e.to_string()))?
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Option<Response> {
    let expected = state.token.as_ref()?;
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    (given != Some(expected.as_str())).then(|| error(StatusCode::UNAUTHORIZED, "missing or invalid bearer token"))
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> std::result::Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

fn check_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> std::result::Result<(), Response> {
    match texts.into_iter().position(|t| t.chars().count() > MAX_TEXT_CHARS) {
        Some(i) => Err(error(StatusCode::PAYLOAD_TOO_LARGE, format!("text {i} exceeds {MAX_TEXT_CHARS} characters"))),
        None => Ok(()),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let m = &state.metrics;
    Json(Health {
        status: "ok".into(),
        embedder: state.embedder.as_ref().map(|e| e.fingerprint()),
        reranker: state.reranker.as_ref().map(|r| r.fingerprint()),
        embedding_requests: m.embedding_requests.load(Ordering::Relaxed),
        ranking_requests: m.ranking_requests.load(Ordering::Relaxed),
        errors: m.errors.load(Ordering::Relaxed),
    })
}

fn counted(state: &AppState, response: Response) -> Response {
    if !response.status().is_success() {
        state.metrics.errors.fetch_add(1, Ordering::Relaxed);
    }
    response
}

async fn embeddings(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    state.metrics.embedding_requests.fetch_add(1, Ordering::Relaxed);
    let response = embeddings_inner(state.clone(), headers, body).await;
    counted(&state, response)
}

async fn embeddings_inner(state: Arc<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    if let Some(denied) = authorize(&state, &headers) {
        return denied;
    }
    let Some(embedder) = state.embedder.clone() else {
        return error(StatusCode::NOT_FOUND, "no embedding model loaded");
    };
    let req: EmbeddingRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let role = match req.input_type.as_deref() {
        None | Some("passage") => TextRole::Passage,
        Some("query") => TextRole::Query,
        Some(other) => return error(StatusCode::BAD_REQUEST, format!("unknown input_type `{other}`")),
    };
    let texts = req.input.into_vec();
    if texts.len() > MAX_PASSAGES {
        return error(StatusCode::PAYLOAD_TOO_LARGE, format!("at most {MAX_PASSAGES} inputs per request"));
    }
    if let Err(resp) = check_texts(texts.iter().map(String::as_str)) {
        return resp;
    }
    let model = embedder.fingerprint();
    let result = tokio::task::spawn_blocking(move || {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        embedder.embed_texts(&refs, role)
    })
    .await;
    match result {
        Ok(Ok(vectors)) => Json(EmbeddingResponse {
            data: vectors.into_iter().enumerate().map(|(index, embedding)| EmbeddingData { index, embedding }).collect(),
            model,
        })
        .into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn ranking(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    state.metrics.ranking_requests.fetch_add(1, Ordering::Relaxed);
    let response = ranking_inner(state.clone(), headers, body).await;
    counted(&state, response)
}

async fn ranking_inner(state: Arc<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    if let Some(denied) = authorize(&state, &headers) {
        return denied;
    }
    let Some(reranker) = state.reranker.clone() else {
        return error(StatusCode::NOT_FOUND, "no ranking model loaded");
    };
    let req: RankRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if req.passages.len() > MAX_PASSAGES {
        return error(StatusCode::PAYLOAD_TOO_LARGE, format!("at most {MAX_PASSAGES} passages per request"));
    }
    if let Err(resp) = check_texts(std::iter::once(req.query.text.as_str()).chain(req.passages.iter().map(|p| p.text.as_str()))) {
        return resp;
    }
    let result = tokio::task::spawn_blocking(move || {
        let refs: Vec<&str> = req.passages.iter().map(|p| p.text.as_str()).collect();
        reranker.score_batch(&req.query.text, &refs).map(|logits| rank(logits, req.top_n))
    })
    .await;
    match result {
        Ok(Ok(rankings)) => Json(RankResponse { rankings }).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Orders by logit descending, original position ascending on ties.
pub fn rank(logits: Vec<f64>, top_n: Option<usize>) -> Vec<Ranking> {
    let mut out: Vec<Ranking> = logits.into_iter().enumerate().map(|(index, logit)| Ranking { index, logit }).collect();
    out.sort_by(|a, b| cmp_score_desc(a.logit, b.logit).then(a.index.cmp(&b.index)));
    out.truncate(top_n.unwrap_or(usize::MAX));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_orders_and_truncates() {
        let r = rank(vec![0.5, 2.0, 0.5, -1.0], Some(3));
        assert_eq!(r.iter().map(|x| x.index).collect::<Vec<_>>(), [1, 0, 2]);
        assert!(rank(vec![], None).is_empty());
    }
}
