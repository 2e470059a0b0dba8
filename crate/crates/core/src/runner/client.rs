//! Blocking HTTP client for the server API, used by the runner and the CLI.

use std::io::Read;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ApiError, ServerApi};
use crate::pipeline::{EnvironmentFingerprint, JobResult};
use crate::server::http::{ErrorBody, SnapshotReply};
use crate::server::{
    ArtifactUpload, BuildRef, BuildView, Capabilities, ClaimedJob, HeartbeatReply, JobView, LogChunk,
    PushEvent, RegisterRequest, Registration, SchedulerState, TriggerRequest,
};
use crate::store::{Digest, ReproReport};

#[derive(Clone)]
pub struct HttpApi {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct DigestReply {
    digest: Digest,
}

#[derive(Serialize)]
struct ClaimBody<'a> {
    capabilities: &'a Capabilities,
}

impl HttpApi {
    /// `server` is the base URL, e.g. `http://127.0.0.1:8975`.
    pub fn new(server: &str, token: Option<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(5))
            .timeout(Duration::from_secs(120))
            .build();
        let base = if server.contains("://") { server.to_string() } else { format!("http://{server}") };
        Self { base: base.trim_end_matches('/').to_string(), token, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn request(&self, method: &str, path: &str) -> ureq::Request {
        let req = self.agent.request(method, &self.url(path));
        match &self.token {
            Some(t) => req.set("Authorization", &format!("Bearer {t}")),
            None => req,
        }
    }

    fn send(&self, req: ureq::Request, body: Option<&[u8]>, content_type: &str) -> Result<ureq::Response, ApiError> {
        let result = match body {
            Some(b) => req.set("Content-Type", content_type).send_bytes(b),
            None => req.call(),
        };
        match result {
            Ok(resp) => Ok(resp),
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let (code, message) = match serde_json::from_str::<ErrorBody>(&text) {
                    Ok(b) => (b.error, b.message),
                    Err(_) => (format!("http_{status}"), text),
                };
                Err(match status {
                    401 => ApiError::Auth(message),
                    s if s >= 500 => ApiError::Transient(format!("{code}: {message}")),
                    _ => ApiError::Rejected { status, code, message },
                })
            }
            Err(e) => Err(ApiError::Transient(e.to_string())),
        }
    }

    fn json<T: DeserializeOwned>(resp: ureq::Response) -> Result<T, ApiError> {
        resp.into_json().map_err(|e| ApiError::Transient(format!("malformed response: {e}")))
    }

    fn bytes(resp: ureq::Response) -> Result<Vec<u8>, ApiError> {
        let mut out = Vec::new();
        resp.into_reader()
            .read_to_end(&mut out)
            .map_err(|e| ApiError::Transient(format!("reading response: {e}")))?;
        Ok(out)
    }

    fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T, ApiError> {
        Self::json(self.send(self.request("GET", path), None, "")?)
    }

    fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ApiError> {
        let bytes = serde_json::to_vec(body).expect("request body serializes");
        Self::json(self.send(self.request("POST", path), Some(&bytes), "application/json")?)
    }

    pub fn register(&self, req: &RegisterRequest) -> Result<Registration, ApiError> {
        self.post_json("/api/v1/runners/register", req)
    }

    /// Uploads a snapshot tarball; returns its commit id.
    pub fn upload_snapshot(&self, tar: &[u8]) -> Result<Digest, ApiError> {
        let resp = self.send(self.request("POST", "/api/v1/snapshots"), Some(tar), "application/x-tar")?;
        Ok(Self::json::<SnapshotReply>(resp)?.commit_id)
    }

    pub fn push(&self, ev: &PushEvent) -> Result<BuildView, ApiError> {
        self.post_json("/api/v1/events/push", ev)
    }

    pub fn trigger(&self, req: &TriggerRequest) -> Result<BuildView, ApiError> {
        self.post_json("/api/v1/builds/trigger", req)
    }

    pub fn cancel(&self, build: &BuildRef) -> Result<BuildView, ApiError> {
        self.post_json(&format!("/api/v1/builds/{build}/cancel"), &serde_json::json!({}))
    }

    pub fn build(&self, build: &BuildRef) -> Result<BuildView, ApiError> {
        self.get_json(&format!("/api/v1/builds/{build}"))
    }

    pub fn builds(&self, repo: &str) -> Result<Vec<BuildView>, ApiError> {
        self.get_json(&format!("/api/v1/repos/{repo}/builds"))
    }

    pub fn job(&self, job_id: u64) -> Result<JobView, ApiError> {
        self.get_json(&format!("/api/v1/jobs/{job_id}"))
    }

    pub fn log(&self, job_id: u64) -> Result<Vec<u8>, ApiError> {
        Self::bytes(self.send(self.request("GET", &format!("/api/v1/jobs/{job_id}/log")), None, "")?)
    }

    pub fn artifact(&self, job_id: u64, path: &str) -> Result<Vec<u8>, ApiError> {
        Self::bytes(self.send(self.request("GET", &format!("/api/v1/jobs/{job_id}/artifacts/{path}")), None, "")?)
    }

    pub fn fingerprint(&self, job_id: u64) -> Result<EnvironmentFingerprint, ApiError> {
        self.get_json(&format!("/api/v1/jobs/{job_id}/fingerprint"))
    }

    pub fn compare(&self, a: &BuildRef, b: &BuildRef, cross_commit: bool) -> Result<ReproReport, ApiError> {
        self.get_json(&format!("/api/v1/compare?a={a}&b={b}&cross_commit={cross_commit}"))
    }

    pub fn scheduler(&self) -> Result<SchedulerState, ApiError> {
        self.get_json("/api/v1/scheduler")
    }
}

impl ServerApi for HttpApi {
    fn claim(&self, caps: &Capabilities) -> Result<Option<ClaimedJob>, ApiError> {
        let body = serde_json::to_vec(&ClaimBody { capabilities: caps }).expect("claim body serializes");
        let resp = self.send(self.request("POST", "/api/v1/jobs/claim"), Some(&body), "application/json")?;
        if resp.status() == 204 {
            return Ok(None);
        }
        Self::json(resp).map(Some)
    }

    fn snapshot_tar(&self, commit: &Digest) -> Result<Vec<u8>, ApiError> {
        Self::bytes(self.send(self.request("GET", &format!("/api/v1/snapshots/{commit}/tar")), None, "")?)
    }

    fn append_log(&self, job_id: u64, seq: u64, data: &[u8]) -> Result<(), ApiError> {
        let chunk = LogChunk { seq, data_base64: BASE64.encode(data) };
        self.post_json::<_, serde_json::Value>(&format!("/api/v1/jobs/{job_id}/logs"), &chunk).map(|_| ())
    }

    fn upload_artifact(&self, job_id: u64, path: &str, data: &[u8]) -> Result<Digest, ApiError> {
        let up = ArtifactUpload { path: path.into(), data_base64: BASE64.encode(data) };
        Ok(self.post_json::<_, DigestReply>(&format!("/api/v1/jobs/{job_id}/artifacts"), &up)?.digest)
    }

    fn complete(&self, job_id: u64, result: &JobResult) -> Result<(), ApiError> {
        self.post_json::<_, serde_json::Value>(&format!("/api/v1/jobs/{job_id}/complete"), result).map(|_| ())
    }

    fn heartbeat(&self, job_id: u64) -> Result<bool, ApiError> {
        let reply: HeartbeatReply = Self::json(self.send(
            self.request("POST", &format!("/api/v1/jobs/{job_id}/heartbeat")),
            Some(b"{}"),
            "application/json",
        )?)?;
        Ok(reply.cancel_requested)
    }
}
