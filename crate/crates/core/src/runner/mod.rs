//! The runner agent: claims jobs, materializes the snapshot into a fresh
//! workspace, executes the pipeline through a backend, and streams logs,
//! artifacts and the result back.
//!
//! The agent talks to the server through [`ServerApi`]; [`client::HttpApi`]
//! speaks the HTTP API and [`local::InProcessApi`] calls a coordinator
//! directly, which is how `labci run` works without a server.

pub mod client;
pub mod local;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::pipeline::{
    failed_before_start, run_job, CancelToken, ExecutorBackend, JobContext, JobResult, LogSink,
    Outcome, RunOptions, RunnerKind,
};
use crate::server::{Capabilities, ClaimedJob};
use crate::store::snapshot::{extract_tar, manifest_of_dir};
use crate::store::{ArtifactEntry, Digest, StoreError};

pub use client::HttpApi;
pub use local::InProcessApi;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApiError {
    #[error("authentication failed: {0}")]
    Auth(String),
    /// Network trouble or a server-side failure; worth retrying.
    #[error("server unreachable: {0}")]
    Transient(String),
    #[error("{code}: {message}")]
    Rejected { status: u16, code: String, message: String },
}

impl ApiError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ApiError::Transient(_))
    }
}

/// The calls a runner makes. Implementations carry the runner token.
pub trait ServerApi: Send + Sync {
    fn claim(&self, caps: &Capabilities) -> Result<Option<ClaimedJob>, ApiError>;
    fn snapshot_tar(&self, commit: &Digest) -> Result<Vec<u8>, ApiError>;
    fn append_log(&self, job_id: u64, seq: u64, data: &[u8]) -> Result<(), ApiError>;
    fn upload_artifact(&self, job_id: u64, path: &str, data: &[u8]) -> Result<Digest, ApiError>;
    fn complete(&self, job_id: u64, result: &JobResult) -> Result<(), ApiError>;
    /// Returns whether the server asked for cancellation.
    fn heartbeat(&self, job_id: u64) -> Result<bool, ApiError>;
}

#[derive(Debug, Clone)]
pub struct RunnerConfig {
    pub kind: RunnerKind,
    pub capabilities: Capabilities,
    pub poll_interval: Duration,
    pub heartbeat_interval: Duration,
    pub workspace_root: PathBuf,
    /// Failed-job workspaces kept for debugging; older ones are removed.
    pub retained_workspaces: usize,
    /// SIGTERM to SIGKILL delay when a stage is stopped.
    pub grace: Duration,
    /// Upper bound for retry backoff.
    pub max_backoff: Duration,
    /// How long log bytes may sit before being sent as a chunk.
    pub flush_interval: Duration,
}

impl RunnerConfig {
    pub fn new(kind: RunnerKind, workspace_root: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            capabilities: Capabilities::default(),
            poll_interval: Duration::from_secs(2),
            heartbeat_interval: Duration::from_secs(10),
            workspace_root: workspace_root.into(),
            retained_workspaces: 5,
            grace: Duration::from_secs(5),
            max_backoff: Duration::from_secs(60),
            flush_interval: Duration::from_millis(100),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.poll_interval > self.heartbeat_interval {
            return Err(format!(
                "poll interval ({:?}) must not exceed heartbeat interval ({:?})",
                self.poll_interval, self.heartbeat_interval
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("server unavailable: {0}")]
    Server(String),
    #[error("invalid runner configuration: {0}")]
    Config(String),
    #[error("workspace: {0}")]
    Workspace(#[from] std::io::Error),
}

impl From<ApiError> for RunnerError {
    fn from(e: ApiError) -> Self {
        match e {
            ApiError::Auth(m) => RunnerError::Auth(m),
            other => RunnerError::Server(other.to_string()),
        }
    }
}

/// What happened to one claimed job, as seen by the runner.
#[derive(Debug, Clone)]
pub struct JobReport {
    pub job_id: u64,
    pub overall: Outcome,
    /// Every log byte produced, in order; equal to the server copy when
    /// forwarding succeeded.
    pub transcript: Vec<u8>,
    /// Kept on failure for inspection.
    pub retained_workspace: Option<PathBuf>,
    /// False if the server stopped accepting updates for the job.
    pub delivered: bool,
}

pub struct Runner {
    config: RunnerConfig,
    api: Arc<dyn ServerApi>,
    backend: Arc<dyn ExecutorBackend>,
}

impl Runner {
    pub fn new(config: RunnerConfig, api: Arc<dyn ServerApi>, backend: Arc<dyn ExecutorBackend>) -> Result<Self, RunnerError> {
        config.validate().map_err(RunnerError::Config)?;
        fs::create_dir_all(&config.workspace_root)?;
        Ok(Self { config, api, backend })
    }

    pub fn config(&self) -> &RunnerConfig {
        &self.config
    }

    /// Claims and runs at most one job.
    pub fn run_once(&self) -> Result<Option<JobReport>, RunnerError> {
        match self.api.claim(&self.config.capabilities)? {
            Some(job) => Ok(Some(self.execute(job)?)),
            None => Ok(None),
        }
    }

    /// Service loop. Returns on authentication failure or once `stop` is set.
    /// Other errors are retried with exponential backoff.
    pub fn attach(&self, stop: &AtomicBool) -> Result<(), RunnerError> {
        let mut failures = 0u32;
        while !stop.load(Ordering::SeqCst) {
            let pause = match self.run_once() {
                Ok(Some(report)) => {
                    tracing::info!(job = report.job_id, overall = %report.overall, "job finished");
                    failures = 0;
                    Duration::ZERO
                }
                Ok(None) => {
                    failures = 0;
                    self.config.poll_interval
                }
                Err(RunnerError::Auth(m)) => return Err(RunnerError::Auth(m)),
                Err(RunnerError::Config(m)) => return Err(RunnerError::Config(m)),
                Err(e) => {
                    failures = failures.saturating_add(1);
                    let delay = backoff(self.config.poll_interval, failures, self.config.max_backoff);
                    tracing::warn!(error = %e, retry_in = ?delay, "claim failed");
                    delay
                }
            };
            sleep_unless(stop, pause);
        }
        Ok(())
    }

    fn execute(&self, job: ClaimedJob) -> Result<JobReport, RunnerError> {
        let job_id = job.job_id;
        let workspace = tempfile::Builder::new()
            .prefix(&format!("job-{job_id}-"))
            .tempdir_in(&self.config.workspace_root)?
            .keep();
        let cancel = CancelToken::new();
        let abandoned = Arc::new(AtomicBool::new(false));
        let heartbeat_every = self.config.heartbeat_interval.min(Duration::from_millis(job.heartbeat_ms.max(1)));
        let heartbeat = Heartbeat::start(self.api.clone(), job_id, heartbeat_every, cancel.clone(), abandoned.clone());
        let (mut sink, forwarder) = LogForwarder::start(
            self.api.clone(),
            job_id,
            self.config.flush_interval,
            self.config.max_backoff,
            abandoned.clone(),
        );

        let mut result = match self.prepare_workspace(&job.commit_id, &workspace) {
            Ok(()) => {
                let ctx = JobContext {
                    job_id,
                    build_id: job.build.build_id,
                    repo_id: job.build.repo_id.clone(),
                    commit_id: job.commit_id.to_hex(),
                };
                let opts = RunOptions { minute: Duration::from_millis(job.minute_ms.max(1)), grace: self.config.grace, cancel };
                run_job(&job.spec, &ctx, self.backend.as_ref(), &workspace, &opts, &mut sink)
            }
            Err(e) => failed_before_start(job_id, &mut sink, &e),
        };
        drop(sink);
        let transcript = forwarder.finish();

        if !abandoned.load(Ordering::SeqCst) {
            let mut uploaded = Vec::with_capacity(result.artifacts.entries.len());
            for entry in &result.artifacts.entries {
                let data = match fs::read(workspace.join(&entry.path)) {
                    Ok(d) => d,
                    Err(e) => {
                        tracing::warn!(path = %entry.path, error = %e, "artifact vanished before upload");
                        continue;
                    }
                };
                if let Some(digest) = self.retry(|| self.api.upload_artifact(job_id, &entry.path, &data), &abandoned) {
                    uploaded.push(ArtifactEntry { path: entry.path.clone(), size: data.len() as u64, digest });
                }
            }
            result.artifacts.entries = uploaded;
            self.retry(|| self.api.complete(job_id, &result), &abandoned);
        }
        heartbeat.stop();

        let delivered = !abandoned.load(Ordering::SeqCst);
        let retained_workspace = if result.overall == Outcome::Succeeded {
            let _ = fs::remove_dir_all(&workspace);
            None
        } else {
            self.prune_workspaces();
            Some(workspace)
        };
        Ok(JobReport { job_id, overall: result.overall, transcript, retained_workspace, delivered })
    }

    /// Fetches the snapshot into `workspace` and checks that the tree hashes
    /// to `commit`.
    pub fn prepare_workspace(&self, commit: &Digest, workspace: &Path) -> Result<(), String> {
        let tar = self
            .retry_fetch(|| self.api.snapshot_tar(commit))
            .map_err(|e| format!("fetch failure: {e}"))?;
        populate_workspace(&tar, commit, workspace).map_err(|e| e.to_string())
    }

    fn retry_fetch<T>(&self, mut f: impl FnMut() -> Result<T, ApiError>) -> Result<T, ApiError> {
        let mut failures = 0;
        loop {
            match f() {
                Err(e) if e.is_transient() && failures < 5 => {
                    failures += 1;
                    thread::sleep(backoff(Duration::from_millis(100), failures, self.config.max_backoff));
                }
                other => return other,
            }
        }
    }

    /// Retries transient failures until the call succeeds. A rejection means
    /// the server no longer wants updates for this job.
    fn retry<T>(&self, mut f: impl FnMut() -> Result<T, ApiError>, abandoned: &AtomicBool) -> Option<T> {
        retry_until(&mut f, abandoned, self.config.max_backoff)
    }

    fn prune_workspaces(&self) {
        let Ok(entries) = fs::read_dir(&self.config.workspace_root) else { return };
        let mut dirs: Vec<(std::time::SystemTime, PathBuf)> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("job-"))
            .filter_map(|e| Some((e.metadata().ok()?.modified().ok()?, e.path())))
            .collect();
        dirs.sort();
        let excess = dirs.len().saturating_sub(self.config.retained_workspaces);
        for (_, path) in dirs.into_iter().take(excess) {
            let _ = fs::remove_dir_all(path);
        }
    }
}

/// Extracts a snapshot tarball into an empty directory and verifies it.
pub fn populate_workspace(tar: &[u8], commit: &Digest, workspace: &Path) -> Result<(), StoreError> {
    extract_tar(tar, workspace)?;
    let actual = manifest_of_dir(workspace)?.digest();
    if actual != *commit {
        return Err(StoreError::DigestMismatch { expected: *commit, actual });
    }
    Ok(())
}

fn backoff(base: Duration, failures: u32, cap: Duration) -> Duration {
    let factor = 1u32 << failures.min(16);
    base.max(Duration::from_millis(10)).saturating_mul(factor).min(cap)
}

fn sleep_unless(stop: &AtomicBool, total: Duration) {
    let end = Instant::now() + total;
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= end {
            break;
        }
        thread::sleep((end - now).min(Duration::from_millis(50)));
    }
}

fn retry_until<T>(f: &mut dyn FnMut() -> Result<T, ApiError>, abandoned: &AtomicBool, cap: Duration) -> Option<T> {
    let mut failures = 0;
    loop {
        if abandoned.load(Ordering::SeqCst) {
            return None;
        }
        match f() {
            Ok(v) => return Some(v),
            Err(e) if e.is_transient() => {
                failures += 1;
                let delay = backoff(Duration::from_millis(100), failures, cap);
                tracing::warn!(error = %e, retry_in = ?delay, "server call failed");
                thread::sleep(delay);
            }
            Err(e) => {
                tracing::warn!(error = %e, "server rejected update; abandoning job");
                abandoned.store(true, Ordering::SeqCst);
                return None;
            }
        }
    }
}

/// Periodic heartbeat; flips the cancel token when the server asks, or when
/// the server no longer recognizes the job.
struct Heartbeat {
    stop: Sender<()>,
    handle: JoinHandle<()>,
}

impl Heartbeat {
    fn start(api: Arc<dyn ServerApi>, job_id: u64, every: Duration, cancel: CancelToken, abandoned: Arc<AtomicBool>) -> Self {
        let (stop, rx) = mpsc::channel::<()>();
        let handle = thread::spawn(move || loop {
            match api.heartbeat(job_id) {
                Ok(true) => cancel.cancel(),
                Ok(false) => {}
                Err(e) if e.is_transient() => tracing::warn!(error = %e, "heartbeat failed"),
                Err(e) => {
                    tracing::warn!(error = %e, "server dropped the job");
                    abandoned.store(true, Ordering::SeqCst);
                    cancel.cancel();
                    return;
                }
            }
            match rx.recv_timeout(every) {
                Err(RecvTimeoutError::Timeout) => {}
                _ => return,
            }
        });
        Self { stop, handle }
    }

    fn stop(self) {
        let _ = self.stop.send(());
        let _ = self.handle.join();
    }
}

/// Batches log bytes into sequenced chunks on a background thread. Chunk
/// boundaries do not matter to the server; only order does.
struct LogForwarder {
    handle: JoinHandle<Vec<u8>>,
}

struct ChannelSink(Sender<Vec<u8>>);

impl LogSink for ChannelSink {
    fn write(&mut self, bytes: &[u8]) {
        let _ = self.0.send(bytes.to_vec());
    }
}

const MAX_CHUNK: usize = 256 * 1024;

impl LogForwarder {
    fn start(
        api: Arc<dyn ServerApi>,
        job_id: u64,
        flush_every: Duration,
        max_backoff: Duration,
        abandoned: Arc<AtomicBool>,
    ) -> (ChannelSink, Self) {
        let (tx, rx) = mpsc::channel::<Vec<u8>>();
        let handle = thread::spawn(move || forward(rx, api.as_ref(), job_id, flush_every, max_backoff, &abandoned));
        (ChannelSink(tx), Self { handle })
    }

    /// Waits for everything to be sent and returns the full transcript.
    fn finish(self) -> Vec<u8> {
        self.handle.join().expect("log forwarder panicked")
    }
}

fn forward(
    rx: Receiver<Vec<u8>>,
    api: &dyn ServerApi,
    job_id: u64,
    flush_every: Duration,
    max_backoff: Duration,
    abandoned: &AtomicBool,
) -> Vec<u8> {
    let mut transcript = Vec::new();
    let mut pending = Vec::new();
    let mut seq = 0u64;
    let mut first_pending: Option<Instant> = None;
    let mut open = true;
    while open || !pending.is_empty() {
        let wait = match first_pending {
            Some(t) => flush_every.saturating_sub(t.elapsed()),
            None => flush_every,
        };
        if open {
            match rx.recv_timeout(wait) {
                Ok(bytes) => {
                    first_pending.get_or_insert_with(Instant::now);
                    transcript.extend_from_slice(&bytes);
                    pending.extend_from_slice(&bytes);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => open = false,
            }
        }
        let due = first_pending.is_some_and(|t| t.elapsed() >= flush_every);
        if !pending.is_empty() && (due || !open || pending.len() >= MAX_CHUNK) {
            let chunk = std::mem::take(&mut pending);
            first_pending = None;
            if !abandoned.load(Ordering::SeqCst) {
                retry_until(&mut || api.append_log(job_id, seq, &chunk), abandoned, max_backoff);
                seq += 1;
            }
        }
    }
    transcript
}
