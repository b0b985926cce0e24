//! HTTP/JSON service over the pooltest library.
//!
//! Sessions are kept in memory and written through to `DATA_DIR/sessions` as
//! JSON snapshots, so a restart resumes them. Zone maps are cached in
//! `DATA_DIR/zones`, keyed by n and resolution, and computed by background
//! jobs; requests that need an unfinished large map answer 202 with progress.

mod api;
mod error;
mod state;

use std::sync::Arc;

use axum::Router;
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use state::{
    AppState, JobStatus, ServiceConfig, DEFAULT_ADDR, DEFAULT_OPTIMIZER_LIMIT, DEFAULT_PENDING_GRACE, INLINE_ZONE_LIMIT,
};

/// The full application: API routes plus the static bundle when configured.
pub fn app(state: Arc<AppState>) -> Router {
    let mut router = api::routes();
    if let Some(dir) = &state.config.static_dir {
        router = router.fallback_service(ServeDir::new(dir));
    }
    router.with_state(state)
}

/// Binds the configured address and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let addr = config.addr;
    let state = AppState::open(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app(state)).await
}
