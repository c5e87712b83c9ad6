//! HTTP routes.
//!
//! | method | path | body / reply |
//! |---|---|---|
//! | GET | `/health` | `{"status":"ok"}` |
//! | POST | `/sessions` | JSON [`CreateSession`] → [`SessionInfo`] |
//! | GET | `/sessions/{id}` | [`SessionInfo`] |
//! | PUT | `/sessions/{id}/scribbles` | PNG or run-length JSON |
//! | GET | `/sessions/{id}/scribbles` | grayscale PNG of raw labels |
//! | POST | `/sessions/{id}/train` | optional `{"epochs": n}`; 202, 409 busy, 422 supervision |
//! | GET | `/sessions/{id}/mask?revision=n` | indexed PNG |
//! | GET | `/sessions/{id}/probabilities?revision=n` | float TIFF, one page per class |
//! | GET | `/sessions/{id}/checkpoint?revision=n` | checkpoint bytes |
//! | GET | `/sessions/{id}/pca/{layer}?upsample=true` | RGB PNG |
//! | GET | `/sessions/{id}/events` | server-sent events |
//!
//! Every session response carries `X-Revision` and `X-Session-Status`
//! headers (JSON bodies repeat them as `revision` and `status`). The mask of
//! revision 0 is an all-unlabeled image flagged with `X-Untrained: true`.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use scribseg::mask::{ClassTable, LabelMask, RunLengthMask};

use crate::error::ApiError;
use crate::session::{Event, ImageSource, RevisionFile, Service, SessionInfo, Status};

type AppState = Arc<Service>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/scribbles", get(get_scribbles).put(put_scribbles))
        .route("/sessions/{id}/train", post(train_session))
        .route("/sessions/{id}/mask", get(get_mask))
        .route("/sessions/{id}/probabilities", get(get_probabilities))
        .route("/sessions/{id}/checkpoint", get(get_checkpoint))
        .route("/sessions/{id}/pca/{layer}", get(get_pca))
        .route("/sessions/{id}/events", get(events))
        .with_state(service)
}

fn tagged(mut resp: Response, revision: u64, status: Status) -> Response {
    let h = resp.headers_mut();
    h.insert("x-revision", HeaderValue::from(revision));
    h.insert("x-session-status", HeaderValue::from_static(status.as_str()));
    resp
}

fn session_json(info: &SessionInfo, code: StatusCode) -> Response {
    tagged((code, Json(info)).into_response(), info.revision, info.status)
}

fn binary(file: RevisionFile, content_type: &'static str) -> Response {
    let resp = ([(CONTENT_TYPE, content_type)], file.bytes).into_response();
    tagged(resp, file.revision, file.status)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_sessions(State(svc): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "sessions": svc.session_ids() }))
}

/// Image by server-side path or inline base64; classes as a full table or
/// as names with default colors.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub image_path: Option<PathBuf>,
    pub image_base64: Option<String>,
    /// File extension recorded for an inline image.
    pub image_format: Option<String>,
    pub spacing_um: Option<f64>,
    pub classes: Option<ClassTable>,
    pub class_names: Option<Vec<String>>,
    pub seed: Option<u64>,
}

async fn create_session(State(svc): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request: {e}")))?;
    let source = match (req.image_path, req.image_base64) {
        (Some(p), None) => ImageSource::Path(p),
        (None, Some(b64)) => ImageSource::Bytes {
            bytes: base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::bad_request(format!("image_base64: {e}")))?,
            extension: req.image_format.unwrap_or_else(|| "png".into()),
        },
        _ => return Err(ApiError::bad_request("give exactly one of image_path and image_base64")),
    };
    let classes = match (req.classes, req.class_names) {
        (Some(t), None) => t,
        (None, Some(names)) => {
            let mut t = ClassTable::default_for(names.len());
            for (c, n) in t.classes.iter_mut().zip(names) {
                c.name = n;
            }
            t
        }
        _ => return Err(ApiError::bad_request("give exactly one of classes and class_names")),
    };
    let spacing = req.spacing_um;
    let seed = req.seed;
    let session = tokio::task::spawn_blocking(move || svc.create(source, spacing, classes, seed))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(session_json(&session.info(), StatusCode::CREATED))
}

async fn get_session(State(svc): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(session_json(&svc.get(&id)?.info(), StatusCode::OK))
}

async fn put_scribbles(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let session = svc.get(&id)?;
    let content_type = headers.get(CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("");
    let (revision, status) = session.snapshot();
    let parsed = if content_type.starts_with("image/png") {
        LabelMask::decode_png(&body).map_err(ApiError::from)
    } else if content_type.starts_with("application/json") {
        serde_json::from_slice::<RunLengthMask>(&body)
            .map_err(|e| ApiError::bad_request(format!("invalid run-length mask: {e}")))
            .and_then(|r| r.to_mask().map_err(ApiError::from))
    } else {
        Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            "send image/png or application/json",
        ))
    };
    let labels = parsed.map_err(|e| e.with_session(revision, status))?;
    let labeled = labels.labeled_count();
    let version = tokio::task::spawn_blocking({
        let session = session.clone();
        move || session.put_scribbles(labels)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let (revision, status) = session.snapshot();
    let body = json!({
        "revision": revision,
        "status": status,
        "scribble_version": version,
        "labeled_pixels": labeled,
    });
    Ok(tagged((StatusCode::OK, Json(body)).into_response(), revision, status))
}

async fn get_scribbles(State(svc): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = svc.get(&id)?;
    Ok(binary(session.scribbles_png()?, "image/png"))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    epochs: Option<usize>,
}

async fn train_session(State(svc): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let session = svc.get(&id)?;
    let req: TrainRequest = if body.iter().all(u8::is_ascii_whitespace) {
        TrainRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| {
            let (r, s) = session.snapshot();
            ApiError::bad_request(format!("invalid request: {e}")).with_session(r, s)
        })?
    };
    let job = svc.begin_training(&session, req.epochs)?;
    let (revision, status) = session.snapshot();
    tokio::task::spawn_blocking(move || svc.run_training(job));
    let body = json!({ "revision": revision, "status": status, "target_revision": revision + 1 });
    Ok(tagged((StatusCode::ACCEPTED, Json(body)).into_response(), revision, status))
}

#[derive(Debug, Default, Deserialize)]
struct RevisionQuery {
    revision: Option<u64>,
}

async fn get_mask(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<RevisionQuery>,
) -> Result<Response, ApiError> {
    let session = svc.get(&id)?;
    let (file, untrained) = tokio::task::spawn_blocking(move || session.mask(q.revision))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let mut resp = binary(file, "image/png");
    resp.headers_mut()
        .insert("x-untrained", HeaderValue::from_static(if untrained { "true" } else { "false" }));
    Ok(resp)
}

async fn get_probabilities(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<RevisionQuery>,
) -> Result<Response, ApiError> {
    let session = svc.get(&id)?;
    let file = tokio::task::spawn_blocking(move || session.probabilities(q.revision))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(binary(file, "image/tiff"))
}

async fn get_checkpoint(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<RevisionQuery>,
) -> Result<Response, ApiError> {
    let session = svc.get(&id)?;
    let file = tokio::task::spawn_blocking(move || session.checkpoint(q.revision))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(binary(file, "application/octet-stream"))
}

#[derive(Debug, Default, Deserialize)]
struct PcaQuery {
    #[serde(default)]
    upsample: bool,
}

async fn get_pca(
    State(svc): State<AppState>,
    Path((id, layer)): Path<(String, String)>,
    Query(q): Query<PcaQuery>,
) -> Result<Response, ApiError> {
    let session = svc.get(&id)?;
    let (revision, status) = session.snapshot();
    let layer: usize = layer
        .parse()
        .map_err(|_| ApiError::bad_request(format!("layer {layer:?} is not a number")).with_session(revision, status))?;
    let (bytes, degenerate) = tokio::task::spawn_blocking({
        let session = session.clone();
        move || svc.pca_png(&session, layer, q.upsample)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let mut resp = tagged(([(CONTENT_TYPE, "image/png")], bytes).into_response(), revision, status);
    resp.headers_mut()
        .insert("x-degenerate", HeaderValue::from_static(if degenerate { "true" } else { "false" }));
    Ok(resp)
}

fn sse(e: &Event) -> SseEvent {
    let name = match e {
        Event::Status { .. } => "status",
        Event::Epoch { .. } => "epoch",
        Event::Committed { .. } => "committed",
        Event::Failed { .. } => "failed",
    };
    SseEvent::default()
        .event(name)
        .data(serde_json::to_string(e).expect("event serializes"))
}

/// Current status first, then every event as it happens.
async fn events(
    State(svc): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ApiError> {
    let session = svc.get(&id)?;
    let rx = session.subscribe();
    let (revision, status) = session.snapshot();
    let first = stream::once(async move { Ok(sse(&Event::Status { revision, status })) });
    let rest = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(e) => return Some((Ok(sse(&e)), rx)),
                Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(first.chain(rest)).keep_alive(KeepAlive::default()))
}
