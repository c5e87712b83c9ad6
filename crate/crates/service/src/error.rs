use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use crate::session::Status;

/// An HTTP error with a machine-readable kind and a human-readable cause.
#[derive(Debug, thiserror::Error)]
#[error("{kind}: {message}")]
pub struct ApiError {
    pub code: StatusCode,
    pub kind: &'static str,
    pub message: String,
    /// Committed revision and status of the session the request was about.
    pub session: Option<(u64, Status)>,
}

impl ApiError {
    pub fn new(code: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
            session: None,
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn busy(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "busy", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn with_session(mut self, revision: u64, status: Status) -> Self {
        self.session = Some((revision, status));
        self
    }
}

impl From<scribseg::Error> for ApiError {
    fn from(e: scribseg::Error) -> Self {
        use scribseg::Error as E;
        match &e {
            E::Supervision(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "supervision", e.to_string()),
            E::Input(_) | E::Config(_) | E::Codec(_) | E::Contract(_) => Self::bad_request(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind, "message": self.message });
        if let Some((revision, status)) = self.session {
            body["revision"] = json!(revision);
            body["status"] = json!(status);
        }
        let mut resp = (self.code, Json(body)).into_response();
        if let Some((revision, status)) = self.session {
            let h = resp.headers_mut();
            h.insert("x-revision", HeaderValue::from(revision));
            h.insert("x-session-status", HeaderValue::from_static(status.as_str()));
        }
        resp
    }
}
