//! HTTP session service for the explorative generation loop: create a
//! session over trained models, adjust the rarity knob, generate batches,
//! inspect and label samples, export. All state lives on disk.

mod api;
mod models;
pub mod store;

use std::future::Future;
use std::path::PathBuf;

pub use api::{params_for_mode, router, ApiError, AppState, GenerationGuard, MAX_BATCH};
pub use models::{load as load_models, resolve as resolve_models, Loaded, ModelError};
pub use store::{Batch, BatchInfo, LabelEvent, Mode, ModelRefs, Session, Store, StoreError};

/// Serves the API on `listener` until `shutdown` resolves. Every write is
/// persisted before its response is sent, so shutdown has nothing to flush
/// beyond letting in-flight requests finish.
pub async fn serve(
    listener: tokio::net::TcpListener,
    store_root: PathBuf,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let store = Store::open(&store_root).map_err(std::io::Error::other)?;
    tracing::info!(store = %store_root.display(), "session store opened");
    axum::serve(listener, router(AppState::new(store)))
        .with_graceful_shutdown(shutdown)
        .await
}
