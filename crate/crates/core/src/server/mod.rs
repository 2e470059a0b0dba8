//! Coordination server: turns snapshot events into builds, hands jobs to
//! runners under a global parallelism cap, and collects logs, artifacts and
//! results.
//!
//! [`Coordinator`] holds all state and is usable in-process; [`http`] puts the
//! JSON API in front of it.

mod coordinator;
pub mod http;
mod journal;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::{JobSpec, Os};
use crate::pipeline::{IllegalTransition, JobResult, JobState, RunnerKind};
use crate::store::{ArtifactManifest, Digest, StoreError};

pub use coordinator::Coordinator;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8975";
pub const DEFAULT_PARALLEL_CAP: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    /// Maximum number of jobs claimed or running at once, across all runners.
    pub parallel_cap: usize,
    /// Expected runner heartbeat period; three missed periods lose the job.
    pub heartbeat_interval: Duration,
    /// Length of one `timeout_minutes` unit, shared with runners on claim.
    pub minute: Duration,
    /// Slack past a job's timeout before the server gives up on the runner.
    pub deadline_grace: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            parallel_cap: DEFAULT_PARALLEL_CAP,
            heartbeat_interval: Duration::from_secs(10),
            minute: Duration::from_secs(60),
            deadline_grace: Duration::from_secs(30),
        }
    }
}

impl ServerConfig {
    /// Reads `LABCI_PARALLEL_CAP`, `LABCI_HEARTBEAT_MS` and `LABCI_MINUTE_MS`.
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Some(cap) = env_number("LABCI_PARALLEL_CAP")? {
            if cap == 0 {
                return Err("LABCI_PARALLEL_CAP must be at least 1".into());
            }
            cfg.parallel_cap = cap as usize;
        }
        if let Some(ms) = env_number("LABCI_HEARTBEAT_MS")? {
            cfg.heartbeat_interval = Duration::from_millis(ms.max(1));
        }
        if let Some(ms) = env_number("LABCI_MINUTE_MS")? {
            cfg.minute = Duration::from_millis(ms.max(1));
        }
        Ok(cfg)
    }
}

fn env_number(name: &str) -> Result<Option<u64>, String> {
    match std::env::var(name) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| format!("{name}: not a number: {v}")),
        Err(_) => Ok(None),
    }
}

/// `<repo_id>:<build number>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BuildRef {
    pub repo_id: String,
    pub build_id: u64,
}

impl BuildRef {
    pub fn new(repo_id: impl Into<String>, build_id: u64) -> Self {
        Self { repo_id: repo_id.into(), build_id }
    }
}

impl fmt::Display for BuildRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.repo_id, self.build_id)
    }
}

impl FromStr for BuildRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (repo, n) = s.rsplit_once(':').ok_or_else(|| format!("build id `{s}` is not <repo>:<n>"))?;
        if !is_valid_repo_id(repo) {
            return Err(format!("invalid repo id `{repo}`"));
        }
        let build_id = n.parse().map_err(|_| format!("build number `{n}` is not an integer"))?;
        Ok(Self { repo_id: repo.into(), build_id })
    }
}

impl Serialize for BuildRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BuildRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Repo ids appear in URLs and build handles: letters, digits, `.`, `_`, `-`.
pub fn is_valid_repo_id(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
    TimedOut,
    Canceled,
    ConfigError,
}

impl BuildStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, BuildStatus::Pending | BuildStatus::Running)
    }

    /// Pure function of the job states. Failed dominates timed_out, which
    /// dominates canceled.
    pub fn derive(config_error: bool, jobs: &[JobState]) -> Self {
        if config_error {
            return BuildStatus::ConfigError;
        }
        if jobs.iter().any(|s| !s.is_terminal()) {
            return if jobs.iter().all(|s| *s == JobState::Queued) {
                BuildStatus::Pending
            } else {
                BuildStatus::Running
            };
        }
        if jobs.contains(&JobState::Failed) {
            BuildStatus::Failed
        } else if jobs.contains(&JobState::TimedOut) {
            BuildStatus::TimedOut
        } else if jobs.contains(&JobState::Canceled) {
            BuildStatus::Canceled
        } else {
            BuildStatus::Succeeded
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BuildStatus::Pending => "pending",
            BuildStatus::Running => "running",
            BuildStatus::Succeeded => "succeeded",
            BuildStatus::Failed => "failed",
            BuildStatus::TimedOut => "timed_out",
            BuildStatus::Canceled => "canceled",
            BuildStatus::ConfigError => "config_error",
        }
    }
}

impl fmt::Display for BuildStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushEvent {
    pub repo_id: String,
    pub commit_id: Digest,
    /// A stored commit id, the digest of an uploaded tarball blob, or a
    /// directory path readable by the server.
    pub snapshot_ref: String,
    pub event_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerRequest {
    pub repo_id: String,
    pub commit_id: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub only_stages: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub os: Os,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl Default for Capabilities {
    fn default() -> Self {
        Self { os: Os::current().unwrap_or_default(), tags: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub kind: RunnerKind,
    #[serde(default)]
    pub capabilities: Capabilities,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub runner_id: String,
    pub token: String,
}

/// What a runner receives from a successful claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimedJob {
    pub job_id: u64,
    pub build: BuildRef,
    pub commit_id: Digest,
    pub spec: JobSpec,
    /// Length of one `timeout_minutes` unit in milliseconds.
    pub minute_ms: u64,
    pub heartbeat_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogChunk {
    pub seq: u64,
    pub data_base64: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogAck {
    pub seq: u64,
    /// Committed log length after this chunk.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactUpload {
    pub path: String,
    pub data_base64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatReply {
    pub cancel_requested: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: u64,
    pub matrix_index: u32,
    pub state: JobState,
    pub assigned_runner: Option<String>,
    pub cancel_requested: bool,
    pub log_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildView {
    pub id: BuildRef,
    pub repo_id: String,
    pub build_id: u64,
    pub commit_id: Digest,
    pub created_at: DateTime<Utc>,
    pub status: BuildStatus,
    pub jobs: Vec<JobSummary>,
    /// Config errors for `config_error` builds, lint-free parse warnings otherwise.
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: u64,
    pub build: BuildRef,
    pub commit_id: Digest,
    pub matrix_index: u32,
    pub spec: JobSpec,
    pub state: JobState,
    pub assigned_runner: Option<String>,
    pub cancel_requested: bool,
    pub log_length: u64,
    pub artifacts: ArtifactManifest,
    pub result: Option<JobResult>,
}

/// Snapshot of the scheduler, for probes and tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub parallel_cap: usize,
    pub active: Vec<u64>,
    pub queued: Vec<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("unknown or missing runner token")]
    AuthFailure,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("snapshot not found: {0}")]
    SnapshotNotFound(String),
    #[error("unknown commit {0}")]
    UnknownCommit(Digest),
    #[error("stage filter leaves no stage to run")]
    EmptyStagePlan,
    #[error("log chunk out of order: expected seq {expected}, got {got}")]
    OutOfOrderChunk { expected: u64, got: u64 },
    #[error("job {0} is not running")]
    JobNotRunning(u64),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error("path escapes workspace: {0}")]
    PathEscapesWorkspace(String),
    #[error("snapshot digest {actual} does not match commit_id {expected}")]
    CommitMismatch { expected: Digest, actual: Digest },
    #[error("builds are from different commits; compare with cross_commit to override")]
    CrossCommitRefused,
    #[error("build {0} is not terminal")]
    NotTerminal(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ServerError {
    pub fn code(&self) -> &'static str {
        match self {
            ServerError::AuthFailure => "auth_failure",
            ServerError::NotFound(_) => "not_found",
            ServerError::SnapshotNotFound(_) => "snapshot_not_found",
            ServerError::UnknownCommit(_) => "unknown_commit",
            ServerError::EmptyStagePlan => "empty_stage_plan",
            ServerError::OutOfOrderChunk { .. } => "out_of_order_chunk",
            ServerError::JobNotRunning(_) => "job_not_running",
            ServerError::IllegalTransition(_) => "illegal_transition",
            ServerError::PathEscapesWorkspace(_) => "path_escapes_workspace",
            ServerError::CommitMismatch { .. } => "commit_mismatch",
            ServerError::CrossCommitRefused => "cross_commit_refused",
            ServerError::NotTerminal(_) => "not_terminal",
            ServerError::BadRequest(_) => "bad_request",
            ServerError::Store(StoreError::NotFound(_)) => "not_found",
            ServerError::Store(StoreError::MatrixShapeMismatch { .. }) => "matrix_shape_mismatch",
            ServerError::Store(StoreError::NotTerminal(_)) => "not_terminal",
            ServerError::Store(StoreError::PathRejected(_)) => "path_escapes_workspace",
            ServerError::Store(_) => "storage_failure",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self.code() {
            "auth_failure" => 401,
            "not_found" | "snapshot_not_found" | "unknown_commit" => 404,
            "out_of_order_chunk" | "job_not_running" | "illegal_transition" | "cross_commit_refused"
            | "not_terminal" | "matrix_shape_mismatch" => 409,
            "storage_failure" => 500,
            _ => 400,
        }
    }
}

impl From<std::io::Error> for ServerError {
    fn from(e: std::io::Error) -> Self {
        ServerError::Store(StoreError::Io(e))
    }
}
