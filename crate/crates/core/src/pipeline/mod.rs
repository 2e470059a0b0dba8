//! Executes one job: the implicit info stage, then the planned stages in
//! order against an executor backend, then artifact collection.

mod artifacts;
mod backend;
pub mod bridge;
mod log;
pub mod process;
mod state;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use artifacts::{collect_artifacts, CollectedFile};
pub use backend::{
    extract_version, run_commands, version_matches, BackendIdentity, ExecError, ExecutorBackend,
    HostFacts, LocalBackend, StageControl, StageOutcome, StageRequest,
};
pub use bridge::{BatchBridgeBackend, BatchScheduler, BatchState, SimulatedConfig, SimulatedScheduler};
pub use log::{format_line, parse_line, timestamp_now, FnSink, JobLog, LogSink};
pub use process::CancelToken;
pub use state::{advance, IllegalTransition, JobEvent, JobState};

use crate::config::{JobSpec, Stage};
use crate::store::ArtifactManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunnerKind {
    Cloud,
    Selfhosted,
}

impl RunnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RunnerKind::Cloud => "cloud",
            RunnerKind::Selfhosted => "selfhosted",
        }
    }
}

impl fmt::Display for RunnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunnerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cloud" => Ok(RunnerKind::Cloud),
            "selfhosted" => Ok(RunnerKind::Selfhosted),
            other => Err(format!("unknown runner kind `{other}` (expected cloud or selfhosted)")),
        }
    }
}

/// Final status of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Succeeded,
    Failed,
    TimedOut,
    Canceled,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Succeeded => "succeeded",
            Outcome::Failed => "failed",
            Outcome::TimedOut => "timed_out",
            Outcome::Canceled => "canceled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Succeeded,
    Failed,
    Skipped,
    TimedOut,
    Canceled,
}

impl fmt::Display for StageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageStatus::Succeeded => "succeeded",
            StageStatus::Failed => "failed",
            StageStatus::Skipped => "skipped",
            StageStatus::TimedOut => "timed_out",
            StageStatus::Canceled => "canceled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRange {
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: Stage,
    pub status: StageStatus,
    pub exit_code: Option<i32>,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
    pub log_range: LogRange,
    /// Machine-readable reason for non-exit failures, e.g. `batch_lost`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentFingerprint {
    pub os_name: String,
    pub os_version: String,
    pub cpu_count: u32,
    pub mem_total_mb: u64,
    pub hostname: String,
    pub runner_kind: RunnerKind,
    pub toolchain_reports: BTreeMap<String, String>,
    pub captured_at: DateTime<Utc>,
}

impl EnvironmentFingerprint {
    /// `key=value` pairs in log order.
    pub fn fields(&self) -> Vec<(String, String)> {
        let mut out = self.comparable_fields();
        out.push(("captured_at".into(), self.captured_at.to_rfc3339_opts(chrono::SecondsFormat::Micros, true)));
        out
    }

    /// All fields except the capture time.
    pub fn comparable_fields(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("os_name".to_string(), self.os_name.clone()),
            ("os_version".to_string(), self.os_version.clone()),
            ("cpu_count".to_string(), self.cpu_count.to_string()),
            ("mem_total_mb".to_string(), self.mem_total_mb.to_string()),
            ("hostname".to_string(), self.hostname.clone()),
            ("runner_kind".to_string(), self.runner_kind.to_string()),
        ];
        for (lang, v) in &self.toolchain_reports {
            out.push((format!("toolchain.{lang}"), v.clone()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobResult {
    pub stage_results: Vec<StageResult>,
    pub overall: Outcome,
    /// Absent only if the info stage itself could not run.
    pub fingerprint: Option<EnvironmentFingerprint>,
    pub artifacts: ArtifactManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_note: Option<String>,
}

impl JobResult {
    /// Status vector in stage order, handy for assertions and display.
    pub fn statuses(&self) -> Vec<(Stage, StageStatus)> {
        self.stage_results.iter().map(|r| (r.stage, r.status)).collect()
    }
}

/// Identity of the job being run, injected as CI variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobContext {
    pub job_id: u64,
    pub build_id: u64,
    pub repo_id: String,
    pub commit_id: String,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Length of one `timeout_minutes` unit. Tests shrink it.
    pub minute: Duration,
    /// Time between SIGTERM and SIGKILL when a process tree is stopped.
    pub grace: Duration,
    pub cancel: CancelToken,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { minute: Duration::from_secs(60), grace: Duration::from_secs(5), cancel: CancelToken::new() }
    }
}

/// The info stage: captures the executing machine and checks the requested
/// toolchain. Returns the fingerprint and the lines to log.
pub fn collect_info(
    backend: &dyn ExecutorBackend,
    spec: &JobSpec,
) -> Result<(EnvironmentFingerprint, Vec<String>), ExecError> {
    let identity = backend.identity();
    let facts = backend.host_facts()?;
    let mut toolchain_reports = BTreeMap::new();
    let mut warnings = Vec::new();
    if let Some(lang) = &spec.env.language {
        if let Some(found) = backend.probe_toolchain(lang) {
            if let Some(requested) = &spec.env.language_version {
                if !version_matches(requested, &found) {
                    warnings.push(format!("toolchain mismatch: requested {requested}, found {found}"));
                }
            }
            toolchain_reports.insert(lang.clone(), found);
        } else if spec.env.language_version.is_some() {
            warnings.push(format!("toolchain probe unavailable for {lang}"));
        }
    }
    let fingerprint = EnvironmentFingerprint {
        os_name: facts.os_name,
        os_version: facts.os_version,
        cpu_count: facts.cpu_count.max(1),
        mem_total_mb: facts.mem_total_mb.max(1),
        hostname: facts.hostname,
        runner_kind: identity.kind,
        toolchain_reports,
        captured_at: Utc::now(),
    };
    let mut lines: Vec<String> = fingerprint.fields().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
    lines.push(format!("backend={}", identity.name));
    lines.extend(warnings);
    Ok((fingerprint, lines))
}

fn ci_env(spec: &JobSpec, ctx: &JobContext, stage: Stage) -> BTreeMap<String, String> {
    let mut env = spec.env.env_vars.clone();
    env.insert("CI".into(), "true".into());
    env.insert("LABCI_JOB_ID".into(), ctx.job_id.to_string());
    env.insert("LABCI_BUILD_ID".into(), ctx.build_id.to_string());
    env.insert("LABCI_COMMIT".into(), ctx.commit_id.clone());
    env.insert("LABCI_STAGE".into(), stage.to_string());
    env.insert("LABCI_MATRIX_INDEX".into(), spec.matrix_index.to_string());
    env
}

/// Runs one stage and logs its output.
pub fn execute_stage(
    backend: &dyn ExecutorBackend,
    workspace: &Path,
    stage: Stage,
    commands: &[String],
    env: &BTreeMap<String, String>,
    ctl: &StageControl,
    log: &mut JobLog<'_>,
) -> Result<StageResult, ExecError> {
    if !workspace.is_dir() {
        return Err(ExecError::WorkspaceMissing(workspace.display().to_string()));
    }
    let offset = log.offset();
    let started_at = Utc::now();
    let outcome = if Instant::now() >= ctl.deadline {
        StageOutcome::TimedOut
    } else {
        let req = StageRequest { workspace, stage, commands, env };
        backend.execute(&req, &mut |line| log.line(stage, line), ctl)?
    };
    let (status, exit_code, note) = match outcome {
        StageOutcome::Exited(0) => (StageStatus::Succeeded, Some(0), None),
        StageOutcome::Exited(code) => (StageStatus::Failed, Some(code), None),
        StageOutcome::TimedOut => {
            log.text(stage, "stage timed out; process tree terminated");
            (StageStatus::TimedOut, None, Some("timeout".to_string()))
        }
        StageOutcome::Canceled => {
            log.text(stage, "stage canceled; process tree terminated");
            (StageStatus::Canceled, None, Some("canceled".to_string()))
        }
        StageOutcome::Lost(reason) => {
            log.text(stage, &reason);
            (StageStatus::Failed, None, Some(reason))
        }
    };
    Ok(StageResult {
        stage,
        status,
        exit_code,
        started_at,
        ended_at: Utc::now().max(started_at),
        log_range: LogRange { offset, length: log.offset() - offset },
        note,
    })
}

fn skipped(stage: Stage, at: u64) -> StageResult {
    let now = Utc::now();
    StageResult {
        stage,
        status: StageStatus::Skipped,
        exit_code: None,
        started_at: now,
        ended_at: now,
        log_range: LogRange { offset: at, length: 0 },
        note: None,
    }
}

fn internal_failure(log: &mut JobLog<'_>, message: &str) -> StageResult {
    let offset = log.offset();
    let now = Utc::now();
    log.text(Stage::Internal, &format!("error: {message}"));
    StageResult {
        stage: Stage::Internal,
        status: StageStatus::Failed,
        exit_code: None,
        started_at: now,
        ended_at: Utc::now().max(now),
        log_range: LogRange { offset, length: log.offset() - offset },
        note: Some(message.to_string()),
    }
}

/// Result for a job that failed before any stage could run, e.g. because its
/// workspace could not be prepared. Logs a single `[internal]` line.
pub fn failed_before_start(job_id: u64, sink: &mut dyn LogSink, message: &str) -> JobResult {
    let mut log = JobLog::new(sink);
    JobResult {
        stage_results: vec![internal_failure(&mut log, message)],
        overall: Outcome::Failed,
        fingerprint: None,
        artifacts: ArtifactManifest { job_id, entries: Vec::new() },
        peak_note: None,
    }
}

fn overall_of(results: &[StageResult]) -> Outcome {
    for r in results {
        match r.status {
            StageStatus::Failed => return Outcome::Failed,
            StageStatus::TimedOut => return Outcome::TimedOut,
            StageStatus::Canceled => return Outcome::Canceled,
            StageStatus::Succeeded | StageStatus::Skipped => {}
        }
    }
    Outcome::Succeeded
}

/// Runs the whole job. Log bytes go to `sink`; the returned result carries
/// per-stage statuses, the fingerprint and the artifact manifest.
///
/// Once a stage does not succeed, every later stage is skipped. Artifacts are
/// collected after the last executed stage, whatever the outcome.
pub fn run_job(
    spec: &JobSpec,
    ctx: &JobContext,
    backend: &dyn ExecutorBackend,
    workspace: &Path,
    opts: &RunOptions,
    sink: &mut dyn LogSink,
) -> JobResult {
    let mut log = JobLog::new(sink);
    let deadline = Instant::now() + opts.minute * spec.timeout_minutes;
    let ctl = StageControl { deadline, cancel: opts.cancel.clone(), grace: opts.grace };
    let mut results = Vec::with_capacity(spec.stage_plan.len() + 1);
    let mut stopped = false;

    let info_start = Utc::now();
    let fingerprint = match collect_info(backend, spec) {
        Ok((fp, lines)) => {
            let offset = log.offset();
            for l in &lines {
                log.text(Stage::Info, l);
            }
            results.push(StageResult {
                stage: Stage::Info,
                status: StageStatus::Succeeded,
                exit_code: Some(0),
                started_at: info_start,
                ended_at: Utc::now().max(info_start),
                log_range: LogRange { offset, length: log.offset() - offset },
                note: None,
            });
            Some(fp)
        }
        Err(e) => {
            results.push(skipped(Stage::Info, log.offset()));
            for p in &spec.stage_plan {
                results.push(skipped(p.stage, log.offset()));
            }
            results.push(internal_failure(&mut log, &e.to_string()));
            stopped = true;
            None
        }
    };

    if !stopped {
        for (i, planned) in spec.stage_plan.iter().enumerate() {
            if stopped {
                results.push(skipped(planned.stage, log.offset()));
                continue;
            }
            let env = ci_env(spec, ctx, planned.stage);
            match execute_stage(backend, workspace, planned.stage, &planned.commands, &env, &ctl, &mut log) {
                Ok(r) => {
                    stopped = r.status != StageStatus::Succeeded;
                    results.push(r);
                }
                Err(e) => {
                    for rest in &spec.stage_plan[i..] {
                        results.push(skipped(rest.stage, log.offset()));
                    }
                    results.push(internal_failure(&mut log, &e.to_string()));
                    break;
                }
            }
        }
    }

    let artifacts = if workspace.is_dir() {
        match collect_artifacts(workspace, &spec.artifacts, ctx.job_id) {
            Ok((m, _)) => m,
            Err(e) => {
                if results.last().map(|r| r.stage) != Some(Stage::Internal) && overall_of(&results) == Outcome::Succeeded {
                    results.push(internal_failure(&mut log, &format!("artifact collection: {e}")));
                } else {
                    log.text(Stage::Internal, &format!("artifact collection: {e}"));
                }
                ArtifactManifest { job_id: ctx.job_id, entries: Vec::new() }
            }
        }
    } else {
        ArtifactManifest { job_id: ctx.job_id, entries: Vec::new() }
    };

    JobResult {
        overall: overall_of(&results),
        stage_results: results,
        fingerprint,
        artifacts,
        peak_note: None,
    }
}

#[cfg(test)]
mod tests;
