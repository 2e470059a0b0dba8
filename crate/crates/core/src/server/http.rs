//! JSON-over-HTTP front end for the [`Coordinator`].

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::*;

type Shared = Arc<Coordinator>;

/// Error body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let body = ErrorBody { error: self.code().into(), message: self.to_string() };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServerError>;

/// Runs blocking coordinator work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.expect("coordinator task panicked")
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServerError::BadRequest(format!("invalid JSON body: {e}")))
}

fn bearer(headers: &HeaderMap) -> ApiResult<String> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_string())
        .ok_or(ServerError::AuthFailure)
}

fn job_id(raw: &str) -> ApiResult<u64> {
    raw.parse().map_err(|_| ServerError::NotFound(format!("job {raw}")))
}

fn build_ref(raw: &str) -> ApiResult<BuildRef> {
    raw.parse().map_err(|_| ServerError::NotFound(format!("build {raw}")))
}

fn decode(data: &str) -> ApiResult<Vec<u8>> {
    BASE64.decode(data).map_err(|e| ServerError::BadRequest(format!("invalid base64: {e}")))
}

pub fn router(coord: Shared) -> Router {
    Router::new()
        .route("/api/v1/events/push", post(push))
        .route("/api/v1/builds/trigger", post(trigger))
        .route("/api/v1/builds/:id", get(get_build))
        .route("/api/v1/builds/:id/cancel", post(cancel))
        .route("/api/v1/repos/:repo/builds", get(list_builds))
        .route("/api/v1/runners/register", post(register))
        .route("/api/v1/jobs/claim", post(claim))
        .route("/api/v1/jobs/:id", get(get_job))
        .route("/api/v1/jobs/:id/logs", post(append_log))
        .route("/api/v1/jobs/:id/log", get(get_log))
        .route("/api/v1/jobs/:id/artifacts", post(upload_artifact))
        .route("/api/v1/jobs/:id/artifacts/*path", get(get_artifact))
        .route("/api/v1/jobs/:id/complete", post(complete))
        .route("/api/v1/jobs/:id/heartbeat", post(heartbeat))
        .route("/api/v1/jobs/:id/fingerprint", get(fingerprint))
        .route("/api/v1/snapshots", post(upload_snapshot))
        .route("/api/v1/snapshots/:commit/tar", get(snapshot_tar))
        .route("/api/v1/compare", get(compare))
        .route("/api/v1/scheduler", get(scheduler))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(coord)
}

/// Serves the API on `listener` until `shutdown` resolves. A background task
/// reaps lost and overdue jobs.
pub async fn serve(
    listener: tokio::net::TcpListener,
    coord: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let tick = (coord.config().heartbeat_interval / 4).clamp(Duration::from_millis(20), Duration::from_secs(1));
    let reaper = {
        let coord = coord.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(tick);
            loop {
                interval.tick().await;
                let c = coord.clone();
                if let Err(e) = blocking(move || c.reap()).await {
                    tracing::error!(error = %e, "reaper failed");
                }
            }
        })
    };
    let result = axum::serve(listener, router(coord)).with_graceful_shutdown(shutdown).await;
    reaper.abort();
    result
}

async fn push(State(c): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<BuildView>)> {
    let ev: PushEvent = parse_body(&body)?;
    let view = blocking(move || c.ingest_push(&ev)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn trigger(State(c): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<BuildView>)> {
    let req: TriggerRequest = parse_body(&body)?;
    let view = blocking(move || c.trigger_build(&req)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_build(State(c): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<BuildView>> {
    let key = build_ref(&id)?;
    Ok(Json(c.get_build(&key)?))
}

async fn cancel(State(c): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<BuildView>> {
    let key = build_ref(&id)?;
    Ok(Json(blocking(move || c.cancel_build(&key)).await?))
}

async fn list_builds(State(c): State<Shared>, Path(repo): Path<String>) -> Json<Vec<BuildView>> {
    Json(c.list_builds(&repo))
}

async fn register(State(c): State<Shared>, body: Bytes) -> ApiResult<Json<Registration>> {
    let req: RegisterRequest = parse_body(&body)?;
    Ok(Json(blocking(move || c.register_runner(&req)).await?))
}

#[derive(Deserialize)]
struct ClaimBody {
    capabilities: Option<Capabilities>,
}

async fn claim(State(c): State<Shared>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let token = bearer(&headers)?;
    let caps = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        parse_body::<ClaimBody>(&body)?.capabilities
    };
    Ok(match blocking(move || c.claim_job(&token, caps.as_ref())).await? {
        Some(job) => Json(job).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn get_job(State(c): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    Ok(Json(c.get_job(job_id(&id)?)?))
}

async fn append_log(
    State(c): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<LogAck>> {
    let token = bearer(&headers)?;
    let id = job_id(&id)?;
    let chunk: LogChunk = parse_body(&body)?;
    let data = decode(&chunk.data_base64)?;
    Ok(Json(blocking(move || c.append_log(&token, id, chunk.seq, &data)).await?))
}

async fn get_log(State(c): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = job_id(&id)?;
    let bytes = blocking(move || c.get_log(id)).await?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], bytes).into_response())
}

#[derive(Serialize)]
struct DigestReply {
    digest: Digest,
}

async fn upload_artifact(
    State(c): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<DigestReply>> {
    let token = bearer(&headers)?;
    let id = job_id(&id)?;
    let up: ArtifactUpload = parse_body(&body)?;
    let data = decode(&up.data_base64)?;
    let digest = blocking(move || c.upload_artifact(&token, id, &up.path, &data)).await?;
    Ok(Json(DigestReply { digest }))
}

async fn get_artifact(State(c): State<Shared>, Path((id, path)): Path<(String, String)>) -> ApiResult<Response> {
    let id = job_id(&id)?;
    let bytes = blocking(move || c.get_artifact(id, &path)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

#[derive(Serialize)]
struct StateReply {
    state: JobState,
}

async fn complete(
    State(c): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<StateReply>> {
    let token = bearer(&headers)?;
    let id = job_id(&id)?;
    let result: JobResult = parse_body(&body)?;
    let state = blocking(move || c.complete_job(&token, id, result)).await?;
    Ok(Json(StateReply { state }))
}

async fn heartbeat(State(c): State<Shared>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Json<HeartbeatReply>> {
    let token = bearer(&headers)?;
    let id = job_id(&id)?;
    let cancel_requested = blocking(move || c.heartbeat(&token, id)).await?;
    Ok(Json(HeartbeatReply { cancel_requested }))
}

async fn fingerprint(State(c): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<crate::pipeline::EnvironmentFingerprint>> {
    let id = job_id(&id)?;
    Ok(Json(blocking(move || c.get_fingerprint(id)).await?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotReply {
    pub commit_id: Digest,
}

async fn upload_snapshot(State(c): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<SnapshotReply>)> {
    let commit_id = blocking(move || c.import_snapshot_tar(&body)).await?;
    Ok((StatusCode::CREATED, Json(SnapshotReply { commit_id })))
}

async fn snapshot_tar(State(c): State<Shared>, Path(commit): Path<String>) -> ApiResult<Response> {
    let commit: Digest = commit.parse().map_err(|_| ServerError::NotFound(format!("snapshot {commit}")))?;
    let bytes = blocking(move || c.snapshot_tar(&commit)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-tar")], bytes).into_response())
}

#[derive(Deserialize)]
struct CompareQuery {
    a: String,
    b: String,
    #[serde(default)]
    cross_commit: bool,
}

async fn compare(State(c): State<Shared>, Query(q): Query<CompareQuery>) -> ApiResult<Json<crate::store::ReproReport>> {
    let a = build_ref(&q.a)?;
    let b = build_ref(&q.b)?;
    Ok(Json(blocking(move || c.compare(&a, &b, q.cross_commit)).await?))
}

async fn scheduler(State(c): State<Shared>) -> Json<SchedulerState> {
    Json(c.scheduler())
}
