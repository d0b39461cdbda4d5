//! HTTP service over the federated job coordinator.
//!
//! [`router`] builds the `/api/v1` routes (see [`api`] for the endpoint
//! table). [`serve`] runs them together with the round-deadline ticker;
//! [`BackgroundServer`] does the same on a dedicated thread, which is how
//! tests and the experiment harness host an in-process server.

pub mod api;
pub mod config;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::DefaultBodyLimit;
use axum::routing::{get, post, put};
use axum::Router;
use flaas_core::global::Coordinator;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tower_http::services::ServeDir;
use tracing::info;

pub use api::AppState;
pub use config::{ApiToken, ConfigError, Role, ServerConfig};

pub fn router(state: AppState, config: &ServerConfig) -> Router {
    let api = Router::new()
        .route("/jobs", post(api::create_job).get(api::list_jobs))
        .route("/jobs/{id}", get(api::get_job).delete(api::delete_job))
        .route("/jobs/{id}/permissions", post(api::update_permissions))
        .route("/jobs/{id}/budget", put(api::set_budget))
        .route("/jobs/{id}/rounds/{round}/selection", get(api::selection))
        .route("/jobs/{id}/rounds/{round}/updates", post(api::submit_update))
        .route("/jobs/{id}/rounds/{round}/close", post(api::close_round))
        .route("/jobs/{id}/model", get(api::get_model))
        .route("/jobs/{id}/metrics", get(api::metrics))
        .layer(DefaultBodyLimit::max(config.payload_cap));
    let app = Router::new().nest("/api/v1", api).with_state(state);
    match &config.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Opens the coordinator (restoring persisted jobs when a data directory is
/// configured).
pub fn open_coordinator(config: &ServerConfig) -> flaas_core::Result<Arc<Coordinator>> {
    Ok(Arc::new(match &config.data_dir {
        Some(dir) => Coordinator::open(dir)?,
        None => Coordinator::in_memory(),
    }))
}

/// Serves on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    coordinator: Arc<Coordinator>,
    config: ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let ticker = {
        let coordinator = coordinator.clone();
        let period = Duration::from_millis(config.tick_ms);
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            loop {
                interval.tick().await;
                for (job, round) in coordinator.close_expired(Instant::now()) {
                    info!(%job, round, "round closed at deadline");
                }
            }
        })
    };
    let app = router(AppState::new(coordinator, &config.tokens), &config);
    info!(addr = %listener.local_addr()?, "listening");
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    ticker.abort();
    result
}

/// A server running on its own thread and runtime.
pub struct BackgroundServer {
    addr: SocketAddr,
    coordinator: Arc<Coordinator>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(config: ServerConfig) -> std::io::Result<Self> {
        let coordinator = open_coordinator(&config).map_err(std::io::Error::other)?;
        let (tx, rx) = oneshot::channel::<()>();
        let (ready_tx, ready_rx) = std::sync::mpsc::channel();
        let served = coordinator.clone();
        // Runs on its own thread so callers may live inside another runtime.
        let thread = std::thread::spawn(move || {
            let runtime = match tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
            {
                Ok(rt) => rt,
                Err(e) => {
                    let _ = ready_tx.send(Err(e));
                    return;
                }
            };
            let listener = match runtime.block_on(TcpListener::bind(config.listen)) {
                Ok(l) => l,
                Err(e) => {
                    let _ = ready_tx.send(Err(e));
                    return;
                }
            };
            let _ = ready_tx.send(listener.local_addr());
            let run = serve(listener, served, config, async {
                let _ = rx.await;
            });
            if let Err(e) = runtime.block_on(run) {
                tracing::error!(error = %e, "server stopped");
            }
            runtime.shutdown_background();
        });
        let addr = ready_rx
            .recv()
            .map_err(|_| std::io::Error::other("server thread exited during startup"))??;
        Ok(Self {
            addr,
            coordinator,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn coordinator(&self) -> &Arc<Coordinator> {
        &self.coordinator
    }

    /// Stops accepting connections and waits for the thread to exit.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        self.halt();
    }
}
