//! Loopback reference server for the distribution protocol.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use anyhow::{Context as _, Result};
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use reverse_core::backends::{DistributionRequest, Need};
use reverse_core::model::ModelParams;
use reverse_core::ToyBackend;
use serde_json::{json, Value};
use tokio::sync::oneshot;

/// Probability table the server sends for `request`.
pub fn respond(backend: &ToyBackend, request: &DistributionRequest) -> Result<BTreeMap<String, f64>, String> {
    let dist = backend.distribution_for(&request.context).map_err(|e| e.to_string())?;
    let vocab = backend.params().vocab();
    let probs = dist.probs();
    let ids: Vec<usize> = match request.need {
        Need::Full => (0..vocab.len()).collect(),
        Need::SpecialTopK => {
            let mut ids: Vec<usize> = vocab.required_ids().to_vec();
            let mut ranked: Vec<usize> = (0..vocab.len()).collect();
            ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            ids.extend(ranked.into_iter().take(request.k));
            ids.sort_unstable();
            ids.dedup();
            ids
        }
    };
    Ok(ids.into_iter().map(|i| (vocab.token(i).to_string(), probs[i])).collect())
}

fn router(backend: Arc<ToyBackend>) -> Router {
    Router::new()
        .route(
            "/v1/vocabulary",
            get(|State(b): State<Arc<ToyBackend>>| async move { Json(json!({ "tokens": b.params().vocab().tokens() })) }),
        )
        .route("/v1/distribution", post(distribution))
        .with_state(backend)
}

async fn distribution(
    State(backend): State<Arc<ToyBackend>>,
    Json(request): Json<DistributionRequest>,
) -> Result<Json<Value>, (StatusCode, String)> {
    respond(&backend, &request).map(|probs| Json(json!({ "probs": probs }))).map_err(|e| (StatusCode::BAD_REQUEST, e))
}

/// A server running on a background thread; stops when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_io().build().context("starting runtime")
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn start(params: Arc<ModelParams>, addr: &str) -> Result<ServerHandle> {
    let rt = runtime()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr)).with_context(|| format!("binding {addr}"))?;
    let bound = listener.local_addr()?;
    let (tx, rx) = oneshot::channel();
    let app = router(Arc::new(ToyBackend::new(params)));
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle { addr: bound, shutdown: Some(tx), thread: Some(thread) })
}

/// Serves in the foreground until the process is stopped.
pub fn run(params: Arc<ModelParams>, addr: &str) -> Result<()> {
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(ToyBackend::new(params)))).await?;
        Ok(())
    })
}
