//! Direct calls into an in-process coordinator.

use std::sync::Arc;

use super::{ApiError, ServerApi};
use crate::pipeline::{JobResult, RunnerKind};
use crate::server::{Capabilities, ClaimedJob, Coordinator, RegisterRequest, ServerError};
use crate::store::{Digest, StoreError};

pub struct InProcessApi {
    coord: Arc<Coordinator>,
    token: String,
}

impl InProcessApi {
    /// Registers a fresh runner with the coordinator.
    pub fn register(coord: Arc<Coordinator>, kind: RunnerKind, capabilities: Capabilities) -> Result<Self, ServerError> {
        let reg = coord.register_runner(&RegisterRequest { kind, capabilities })?;
        Ok(Self { coord, token: reg.token })
    }

    pub fn with_token(coord: Arc<Coordinator>, token: String) -> Self {
        Self { coord, token }
    }
}

fn api_error(e: ServerError) -> ApiError {
    match e {
        ServerError::AuthFailure => ApiError::Auth(e.to_string()),
        ServerError::Store(StoreError::Io(_)) => ApiError::Transient(e.to_string()),
        other => ApiError::Rejected { status: other.http_status(), code: other.code().into(), message: other.to_string() },
    }
}

impl ServerApi for InProcessApi {
    fn claim(&self, caps: &Capabilities) -> Result<Option<ClaimedJob>, ApiError> {
        self.coord.claim_job(&self.token, Some(caps)).map_err(api_error)
    }

    fn snapshot_tar(&self, commit: &Digest) -> Result<Vec<u8>, ApiError> {
        self.coord.snapshot_tar(commit).map_err(api_error)
    }

    fn append_log(&self, job_id: u64, seq: u64, data: &[u8]) -> Result<(), ApiError> {
        self.coord.append_log(&self.token, job_id, seq, data).map(|_| ()).map_err(api_error)
    }

    fn upload_artifact(&self, job_id: u64, path: &str, data: &[u8]) -> Result<Digest, ApiError> {
        self.coord.upload_artifact(&self.token, job_id, path, data).map_err(api_error)
    }

    fn complete(&self, job_id: u64, result: &JobResult) -> Result<(), ApiError> {
        self.coord.complete_job(&self.token, job_id, result.clone()).map(|_| ()).map_err(api_error)
    }

    fn heartbeat(&self, job_id: u64) -> Result<bool, ApiError> {
        self.coord.heartbeat(&self.token, job_id).map_err(api_error)
    }
}
