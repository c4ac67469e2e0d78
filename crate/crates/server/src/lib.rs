//! ReCraft nodes and the naming registry as HTTP services.
//!
//! [`node::start`] runs one node: a driver task owns the state machine and
//! its [`FileStore`](recraft_core::storage::FileStore), and axum handlers
//! feed it requests over a channel. [`registry::start`] runs the naming
//! registry together with the address book nodes use to find each other.
//! The endpoints are listed in [`recraft_client::api`].

pub mod node;
pub mod registry;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use recraft_client::api::ApiError;
use recraft_core::storage::StorageError;
use std::net::SocketAddr;
use thiserror::Error;
use tokio::sync::watch;
use tokio::task::JoinHandle;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("storage: {0}")]
    Storage(#[from] StorageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// A running service.
pub struct Handle {
    addr: SocketAddr,
    url: String,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl Handle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// The base URL other processes reach this service at.
    pub fn url(&self) -> &str {
        &self.url
    }

    /// Stops serving and waits for every task to finish.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

/// An error response with an [`ApiError`] body.
#[derive(Debug)]
pub(crate) struct Failure(StatusCode, String);

impl Failure {
    fn bad_request(msg: impl ToString) -> Self {
        Failure(StatusCode::BAD_REQUEST, msg.to_string())
    }

    fn unavailable() -> Self {
        Failure(StatusCode::SERVICE_UNAVAILABLE, "node is shutting down".into())
    }

    fn timeout() -> Self {
        Failure(StatusCode::GATEWAY_TIMEOUT, "no reply before the deadline".into())
    }

    fn internal(msg: impl ToString) -> Self {
        Failure(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(ApiError { error: self.1 })).into_response()
    }
}

async fn stopped(mut rx: watch::Receiver<bool>) {
    let _ = rx.wait_for(|v| *v).await;
}
