//! HTTP routes. Errors are JSON `{code, message, field}` with 404, 409 or
//! 422 status codes.

use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::ImageFormat;
use peifg_core::datagen::FilterDecision;
use peifg_core::sample::{load_image, Sample};
use peifg_core::vfe::render_markers;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::queue::{QueueItem, ReviewQueue};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(self.body())).into_response()
    }
}

type Shared = Arc<ReviewQueue>;

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    #[serde(default)]
    pub annotator: String,
}

/// `item` is null when nothing is pending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextResponse {
    pub item: Option<QueueItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub item_id: String,
    pub decision: FilterDecision,
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ratio() -> f64 {
    0.9
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddResponse {
    pub added: usize,
}

async fn next(State(q): State<Shared>, Query(p): Query<NextQuery>) -> Result<Json<NextResponse>, ServiceError> {
    Ok(Json(NextResponse { item: q.next_item(&p.annotator)? }))
}

async fn decide(State(q): State<Shared>, Json(req): Json<DecisionRequest>) -> Result<Response, ServiceError> {
    Ok(Json(q.submit(&req.item_id, req.decision)?).into_response())
}

async fn export(State(q): State<Shared>, Query(p): Query<ExportQuery>) -> Result<Response, ServiceError> {
    Ok(Json(q.export(p.ratio, p.seed)?).into_response())
}

async fn add_items(
    State(q): State<Shared>,
    Json(samples): Json<Vec<Sample>>,
) -> Result<Json<AddResponse>, ServiceError> {
    Ok(Json(AddResponse { added: q.add(samples)? }))
}

async fn item(State(q): State<Shared>, Path(id): Path<String>) -> Result<Json<QueueItem>, ServiceError> {
    Ok(Json(q.item(&id)?))
}

async fn image(State(q): State<Shared>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let sample = q.sample(&id)?;
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ServiceError> {
        let img = load_image(&sample.image)?;
        let marked = render_markers(&img, &sample.objects)?;
        let mut out = Cursor::new(Vec::new());
        marked.pixels.write_to(&mut out, ImageFormat::Png).map_err(|e| ServiceError::Core(e.into()))?;
        Ok(out.into_inner())
    })
    .await
    .map_err(|e| ServiceError::Io(std::io::Error::other(e)))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(queue: Arc<ReviewQueue>) -> Router {
    Router::new()
        .route("/api/queue/next", get(next))
        .route("/api/decisions", post(decide))
        .route("/api/export", get(export))
        .route("/api/items", post(add_items))
        .route("/api/items/{id}", get(item))
        .route("/api/items/{id}/image", get(image))
        .with_state(queue)
}

/// Binds `addr` and serves until the task is dropped.
pub async fn serve(addr: SocketAddr, queue: Arc<ReviewQueue>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, router(queue)).await
}
