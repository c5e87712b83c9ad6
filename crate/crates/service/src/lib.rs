//! Session service for the interactive scribble loop: create a session from
//! an image, upload scribbles, train, and fetch masks, probabilities and
//! feature maps over HTTP.
//!
//! State lives in an on-disk store (see [`store`]); a restarted service
//! resumes every session at its last committed revision.

pub mod api;
pub mod error;
pub mod session;
pub mod store;

use std::future::Future;
use std::path::Path;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use api::router;
pub use error::ApiError;
pub use session::{Event, Service, SessionInfo, Status};

/// Opens the store and serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    root: &Path,
    config: scribseg::config::WorkbenchConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let root = root.to_path_buf();
    let service = tokio::task::spawn_blocking(move || Service::open(&root, config))
        .await
        .map_err(std::io::Error::other)?
        .map_err(std::io::Error::other)?;
    axum::serve(listener, router(Arc::new(service)))
        .with_graceful_shutdown(shutdown)
        .await
}
