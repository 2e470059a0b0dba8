use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use chrono::{DateTime, Utc};
use rand::RngCore;

use super::journal::{Journal, NewJob, Record};
use super::*;
use crate::config::{expand_matrix, parse_config, Stage, CONFIG_FILE};
use crate::pipeline::{
    advance, format_line, timestamp_now, EnvironmentFingerprint, JobEvent, LogRange, Outcome,
    StageResult, StageStatus,
};
use crate::store::{validate_relative_path, ArtifactEntry, LedgerEntry, ReproReport, Store};

/// Owns builds, jobs and runners. All mutations go through one lock and are
/// journaled before they are applied, so a restart replays to the same state.
pub struct Coordinator {
    store: Arc<Store>,
    config: ServerConfig,
    inner: Mutex<Inner>,
}

struct Inner {
    state: State,
    journal: Journal,
}

impl Inner {
    fn commit(&mut self, record: Record) -> Result<(), ServerError> {
        self.journal.append(&record)?;
        self.state.apply(&record);
        Ok(())
    }
}

struct BuildState {
    commit_id: Digest,
    created_at: DateTime<Utc>,
    config_error: bool,
    diagnostics: Vec<String>,
    jobs: Vec<u64>,
}

struct JobEntry {
    job_id: u64,
    build: BuildRef,
    commit_id: Digest,
    spec: JobSpec,
    state: JobState,
    assigned_runner: Option<String>,
    cancel_requested: bool,
    log_len: u64,
    next_seq: u64,
    artifacts: ArtifactManifest,
    result: Option<JobResult>,
    claimed_at: Option<DateTime<Utc>>,
    /// Last sign of life from the assigned runner. Not persisted: a restart
    /// gives every runner a fresh window.
    last_seen: Instant,
}

struct RunnerEntry {
    capabilities: Capabilities,
}

#[derive(Default)]
struct State {
    builds: BTreeMap<BuildRef, BuildState>,
    last_build: HashMap<String, u64>,
    events: HashMap<String, BuildRef>,
    jobs: BTreeMap<u64, JobEntry>,
    queued: BTreeSet<u64>,
    active: BTreeSet<u64>,
    runners: BTreeMap<String, RunnerEntry>,
    tokens: HashMap<Digest, String>,
    next_job: u64,
    next_runner: u64,
}

impl State {
    fn apply(&mut self, record: &Record) {
        match record {
            Record::RunnerRegistered { runner_id, capabilities, token_digest, .. } => {
                self.tokens.insert(*token_digest, runner_id.clone());
                self.runners.insert(runner_id.clone(), RunnerEntry { capabilities: capabilities.clone() });
                self.next_runner += 1;
            }
            Record::BuildCreated { repo_id, build_id, commit_id, event_id, created_at, config_error, diagnostics, jobs } => {
                let key = BuildRef::new(repo_id.clone(), *build_id);
                let last = self.last_build.entry(repo_id.clone()).or_default();
                *last = (*last).max(*build_id);
                if let Some(ev) = event_id {
                    self.events.insert(ev.clone(), key.clone());
                }
                for j in jobs {
                    self.jobs.insert(
                        j.job_id,
                        JobEntry {
                            job_id: j.job_id,
                            build: key.clone(),
                            commit_id: *commit_id,
                            spec: j.spec.clone(),
                            state: JobState::Queued,
                            assigned_runner: None,
                            cancel_requested: false,
                            log_len: 0,
                            next_seq: 0,
                            artifacts: ArtifactManifest { job_id: j.job_id, entries: Vec::new() },
                            result: None,
                            claimed_at: None,
                            last_seen: Instant::now(),
                        },
                    );
                    self.queued.insert(j.job_id);
                    self.next_job = self.next_job.max(j.job_id + 1);
                }
                self.builds.insert(
                    key,
                    BuildState {
                        commit_id: *commit_id,
                        created_at: *created_at,
                        config_error: *config_error,
                        diagnostics: diagnostics.clone(),
                        jobs: jobs.iter().map(|j| j.job_id).collect(),
                    },
                );
            }
            Record::JobClaimed { job_id, runner_id, at } => {
                let job = self.jobs.get_mut(job_id).expect("journal names a known job");
                job.state = JobState::Claimed;
                job.assigned_runner = Some(runner_id.clone());
                job.claimed_at = Some(*at);
                job.last_seen = Instant::now();
                self.queued.remove(job_id);
                self.active.insert(*job_id);
            }
            Record::JobStarted { job_id } => {
                self.jobs.get_mut(job_id).expect("journal names a known job").state = JobState::Running;
            }
            Record::LogAppended { job_id, next_seq, length } => {
                let job = self.jobs.get_mut(job_id).expect("journal names a known job");
                job.next_seq = *next_seq;
                job.log_len = *length;
            }
            Record::ArtifactRecorded { job_id, entry } => {
                self.jobs.get_mut(job_id).expect("journal names a known job").artifacts.upsert(entry.clone());
            }
            Record::CancelRequested { job_id } => {
                self.jobs.get_mut(job_id).expect("journal names a known job").cancel_requested = true;
            }
            Record::JobFinished { job_id, state, result } => {
                let job = self.jobs.get_mut(job_id).expect("journal names a known job");
                job.state = *state;
                job.result = result.clone();
                self.queued.remove(job_id);
                self.active.remove(job_id);
            }
        }
    }

    fn runner_for(&self, token: &str) -> Result<String, ServerError> {
        self.tokens.get(&Digest::of(token.as_bytes())).cloned().ok_or(ServerError::AuthFailure)
    }

    fn job(&self, job_id: u64) -> Result<&JobEntry, ServerError> {
        self.jobs.get(&job_id).ok_or_else(|| ServerError::NotFound(format!("job {job_id}")))
    }

    /// The job, if `runner` holds it.
    fn assigned(&self, runner: &str, job_id: u64) -> Result<&JobEntry, ServerError> {
        let job = self.job(job_id)?;
        if job.assigned_runner.as_deref() != Some(runner) {
            return Err(ServerError::AuthFailure);
        }
        Ok(job)
    }

    fn touch(&mut self, job_id: u64) {
        if let Some(job) = self.jobs.get_mut(&job_id) {
            job.last_seen = Instant::now();
        }
    }

    fn build(&self, key: &BuildRef) -> Result<&BuildState, ServerError> {
        self.builds.get(key).ok_or_else(|| ServerError::NotFound(format!("build {key}")))
    }

    fn build_status(&self, b: &BuildState) -> BuildStatus {
        let states: Vec<JobState> = b.jobs.iter().map(|id| self.jobs[id].state).collect();
        BuildStatus::derive(b.config_error, &states)
    }

    fn build_view(&self, key: &BuildRef) -> BuildView {
        let b = &self.builds[key];
        BuildView {
            id: key.clone(),
            repo_id: key.repo_id.clone(),
            build_id: key.build_id,
            commit_id: b.commit_id,
            created_at: b.created_at,
            status: self.build_status(b),
            jobs: b.jobs.iter().map(|id| summary(&self.jobs[id])).collect(),
            diagnostics: b.diagnostics.clone(),
        }
    }
}

fn summary(job: &JobEntry) -> JobSummary {
    JobSummary {
        job_id: job.job_id,
        matrix_index: job.spec.matrix_index,
        state: job.state,
        assigned_runner: job.assigned_runner.clone(),
        cancel_requested: job.cancel_requested,
        log_length: job.log_len,
    }
}

fn check_repo(repo_id: &str) -> Result<(), ServerError> {
    if is_valid_repo_id(repo_id) {
        Ok(())
    } else {
        Err(ServerError::BadRequest(format!("invalid repo id `{repo_id}`")))
    }
}

/// Jobs a snapshot's config expands to, or the reasons it does not parse.
struct Plan {
    config_error: bool,
    diagnostics: Vec<String>,
    specs: Vec<JobSpec>,
}

impl Coordinator {
    pub fn open(store: Arc<Store>, config: ServerConfig) -> Result<Self, ServerError> {
        let (journal, records) = Journal::open(&store.root().join("journal.jsonl"))?;
        let mut state = State { next_job: 1, ..State::default() };
        for r in &records {
            state.apply(r);
        }
        // A crash between the ledger append and the journal record leaves the
        // ledger ahead; it is the authority on terminal states.
        for e in store.ledger().entries() {
            if let Some(job) = state.jobs.get_mut(&e.job_id) {
                if !job.state.is_terminal() {
                    job.state = e.overall.into();
                    state.queued.remove(&e.job_id);
                    state.active.remove(&e.job_id);
                }
            }
        }
        // Log bytes past the last journaled length were never acknowledged.
        for job in state.jobs.values_mut() {
            let path = store.log_path(job.job_id);
            if let Ok(meta) = fs::metadata(&path) {
                if meta.len() > job.log_len {
                    let f = OpenOptions::new().write(true).open(&path)?;
                    f.set_len(job.log_len)?;
                    f.sync_all()?;
                } else if meta.len() < job.log_len {
                    tracing::warn!(job = job.job_id, "log shorter than journaled length");
                    job.log_len = meta.len();
                }
            }
        }
        Ok(Self { store, config, inner: Mutex::new(Inner { state, journal }) })
    }

    /// Opens (or creates) a data directory.
    pub fn open_dir(data_dir: &Path, config: ServerConfig) -> Result<Self, ServerError> {
        Self::open(Arc::new(Store::open(data_dir)?), config)
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("coordinator lock poisoned")
    }

    pub fn ingest_push(&self, ev: &PushEvent) -> Result<BuildView, ServerError> {
        check_repo(&ev.repo_id)?;
        if ev.event_id.is_empty() {
            return Err(ServerError::BadRequest("event_id is empty".into()));
        }
        {
            let inner = self.lock();
            if let Some(key) = inner.state.events.get(&ev.event_id) {
                return Ok(inner.state.build_view(key));
            }
        }
        let commit = self.resolve_snapshot(&ev.snapshot_ref, &ev.commit_id)?;
        let plan = self.plan(&commit)?;
        let mut inner = self.lock();
        if let Some(key) = inner.state.events.get(&ev.event_id) {
            return Ok(inner.state.build_view(key));
        }
        let key = self.create_build(&mut inner, &ev.repo_id, commit, Some(ev.event_id.clone()), plan, None)?;
        Ok(inner.state.build_view(&key))
    }

    pub fn trigger_build(&self, req: &TriggerRequest) -> Result<BuildView, ServerError> {
        check_repo(&req.repo_id)?;
        if !self.store.has_snapshot(&req.commit_id) {
            return Err(ServerError::UnknownCommit(req.commit_id));
        }
        let only = match &req.only_stages {
            Some(names) => Some(
                names
                    .iter()
                    .map(|n| n.parse::<Stage>().map_err(ServerError::BadRequest))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            None => None,
        };
        let plan = self.plan(&req.commit_id)?;
        let mut inner = self.lock();
        let key = self.create_build(&mut inner, &req.repo_id, req.commit_id, None, plan, only.as_deref())?;
        Ok(inner.state.build_view(&key))
    }

    fn resolve_snapshot(&self, snapshot_ref: &str, commit: &Digest) -> Result<Digest, ServerError> {
        if self.store.has_snapshot(commit) {
            return Ok(*commit);
        }
        let actual = if let Ok(d) = snapshot_ref.parse::<Digest>() {
            if self.store.has_snapshot(&d) {
                d
            } else if self.store.blobs().contains(&d) {
                let tar = self.store.get_blob(&d)?;
                self.store.snapshot_import_tar(&tar[..])?.1
            } else {
                return Err(ServerError::SnapshotNotFound(snapshot_ref.into()));
            }
        } else {
            let dir = Path::new(snapshot_ref);
            if !dir.is_dir() {
                return Err(ServerError::SnapshotNotFound(snapshot_ref.into()));
            }
            self.store.snapshot_import_dir(dir)?.1
        };
        if actual != *commit {
            return Err(ServerError::CommitMismatch { expected: *commit, actual });
        }
        Ok(actual)
    }

    fn plan(&self, commit: &Digest) -> Result<Plan, ServerError> {
        let failed = |msg: String| Plan { config_error: true, diagnostics: vec![msg], specs: Vec::new() };
        let Some(bytes) = self.store.read_snapshot_file(commit, CONFIG_FILE)? else {
            return Ok(failed(format!("missing {CONFIG_FILE}")));
        };
        let Ok(text) = String::from_utf8(bytes) else {
            return Ok(failed(format!("{CONFIG_FILE} is not UTF-8")));
        };
        Ok(match parse_config(&text) {
            Ok((cfg, warnings)) => Plan {
                config_error: false,
                diagnostics: warnings.iter().map(|w| format!("warning: {w}")).collect(),
                specs: expand_matrix(&cfg),
            },
            Err(e) => failed(e.to_string()),
        })
    }

    fn create_build(
        &self,
        inner: &mut Inner,
        repo_id: &str,
        commit_id: Digest,
        event_id: Option<String>,
        plan: Plan,
        only: Option<&[Stage]>,
    ) -> Result<BuildRef, ServerError> {
        let mut specs = plan.specs;
        if let Some(only) = only {
            for spec in &mut specs {
                if !spec.retain_stages(only) {
                    return Err(ServerError::EmptyStagePlan);
                }
            }
        }
        let build_id = inner.state.last_build.get(repo_id).copied().unwrap_or(0) + 1;
        let first = inner.state.next_job;
        let jobs = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| NewJob { job_id: first + i as u64, spec })
            .collect();
        inner.commit(Record::BuildCreated {
            repo_id: repo_id.into(),
            build_id,
            commit_id,
            event_id,
            created_at: Utc::now(),
            config_error: plan.config_error,
            diagnostics: plan.diagnostics,
            jobs,
        })?;
        Ok(BuildRef::new(repo_id, build_id))
    }

    pub fn register_runner(&self, req: &RegisterRequest) -> Result<Registration, ServerError> {
        let mut raw = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        let mut inner = self.lock();
        let runner_id = format!("runner-{}", inner.state.next_runner + 1);
        inner.commit(Record::RunnerRegistered {
            runner_id: runner_id.clone(),
            kind: req.kind,
            capabilities: req.capabilities.clone(),
            token_digest: Digest::of(token.as_bytes()),
            at: Utc::now(),
        })?;
        Ok(Registration { runner_id, token })
    }

    /// Hands the oldest eligible queued job to the caller, or `None`. Runs
    /// entirely under the lock, so no job is ever given out twice.
    pub fn claim_job(&self, token: &str, caps: Option<&Capabilities>) -> Result<Option<ClaimedJob>, ServerError> {
        let mut inner = self.lock();
        let runner_id = inner.state.runner_for(token)?;
        let os = match caps {
            Some(c) => c.os,
            None => inner.state.runners[&runner_id].capabilities.os,
        };
        if inner.state.active.len() >= self.config.parallel_cap {
            return Ok(None);
        }
        let st = &inner.state;
        let Some(job_id) = st.queued.iter().copied().find(|id| st.jobs[id].spec.env.os == os) else {
            return Ok(None);
        };
        advance(JobState::Queued, JobEvent::Claimed)?;
        inner.commit(Record::JobClaimed { job_id, runner_id, at: Utc::now() })?;
        let job = &inner.state.jobs[&job_id];
        Ok(Some(ClaimedJob {
            job_id,
            build: job.build.clone(),
            commit_id: job.commit_id,
            spec: job.spec.clone(),
            minute_ms: self.config.minute.as_millis() as u64,
            heartbeat_ms: self.config.heartbeat_interval.as_millis() as u64,
        }))
    }

    fn start_if_claimed(&self, inner: &mut Inner, job_id: u64) -> Result<(), ServerError> {
        let state = inner.state.jobs[&job_id].state;
        if state == JobState::Claimed {
            advance(state, JobEvent::Started)?;
            inner.commit(Record::JobStarted { job_id })?;
        }
        Ok(())
    }

    /// Applies chunk `seq` if it is the next one; a repeat of an applied
    /// chunk is acknowledged without effect.
    pub fn append_log(&self, token: &str, job_id: u64, seq: u64, data: &[u8]) -> Result<LogAck, ServerError> {
        let mut inner = self.lock();
        let runner = inner.state.runner_for(token)?;
        let job = inner.state.assigned(&runner, job_id)?;
        if !job.state.is_active() {
            return Err(ServerError::JobNotRunning(job_id));
        }
        if seq < job.next_seq {
            let ack = LogAck { seq, length: job.log_len };
            inner.state.touch(job_id);
            return Ok(ack);
        }
        if seq > job.next_seq {
            return Err(ServerError::OutOfOrderChunk { expected: job.next_seq, got: seq });
        }
        let offset = job.log_len;
        self.write_log(job_id, offset, data)?;
        self.start_if_claimed(&mut inner, job_id)?;
        let length = offset + data.len() as u64;
        inner.commit(Record::LogAppended { job_id, next_seq: seq + 1, length })?;
        inner.state.touch(job_id);
        Ok(LogAck { seq, length })
    }

    pub fn upload_artifact(&self, token: &str, job_id: u64, path: &str, data: &[u8]) -> Result<Digest, ServerError> {
        let mut inner = self.lock();
        let runner = inner.state.runner_for(token)?;
        let job = inner.state.assigned(&runner, job_id)?;
        validate_relative_path(path).map_err(|_| ServerError::PathEscapesWorkspace(path.into()))?;
        if !job.state.is_active() {
            return Err(ServerError::JobNotRunning(job_id));
        }
        let digest = self.store.put_blob(data)?;
        let entry = ArtifactEntry { path: path.into(), size: data.len() as u64, digest };
        if job.artifacts.get(path) != Some(&entry) {
            inner.commit(Record::ArtifactRecorded { job_id, entry })?;
        }
        inner.state.touch(job_id);
        Ok(digest)
    }

    /// Records the runner's result. Every artifact it lists must have been
    /// uploaded with the same digest; the server's manifest is what is kept.
    pub fn complete_job(&self, token: &str, job_id: u64, mut result: JobResult) -> Result<JobState, ServerError> {
        let mut inner = self.lock();
        let runner = inner.state.runner_for(token)?;
        let job = inner.state.assigned(&runner, job_id)?;
        let next = advance(job.state, JobEvent::Completed(result.overall))?;
        for e in &result.artifacts.entries {
            match job.artifacts.get(&e.path) {
                Some(have) if have.digest == e.digest => {}
                _ => return Err(ServerError::BadRequest(format!("artifact {} was not uploaded", e.path))),
            }
        }
        result.artifacts = job.artifacts.clone();
        self.finish(&mut inner, job_id, next, Some(result))?;
        Ok(next)
    }

    /// Returns whether cancellation was requested for the job.
    pub fn heartbeat(&self, token: &str, job_id: u64) -> Result<bool, ServerError> {
        let mut inner = self.lock();
        let runner = inner.state.runner_for(token)?;
        let job = inner.state.assigned(&runner, job_id)?;
        if !job.state.is_active() {
            return Err(ServerError::JobNotRunning(job_id));
        }
        let cancel = job.cancel_requested;
        self.start_if_claimed(&mut inner, job_id)?;
        inner.state.touch(job_id);
        Ok(cancel)
    }

    /// Queued jobs are canceled at once; claimed and running jobs are
    /// flagged and their runners stop on the next heartbeat.
    pub fn cancel_build(&self, key: &BuildRef) -> Result<BuildView, ServerError> {
        let mut inner = self.lock();
        let jobs = inner.state.build(key)?.jobs.clone();
        for job_id in jobs {
            let job = &inner.state.jobs[&job_id];
            match job.state {
                JobState::Queued => {
                    let next = advance(JobState::Queued, JobEvent::CancelRequested)?;
                    self.finish(&mut inner, job_id, next, None)?;
                }
                JobState::Claimed | JobState::Running if !job.cancel_requested => {
                    inner.commit(Record::CancelRequested { job_id })?;
                }
                _ => {}
            }
        }
        Ok(inner.state.build_view(key))
    }

    /// Fails jobs whose runner stopped heartbeating and times out jobs well
    /// past their deadline. Returns the affected job ids.
    pub fn reap(&self) -> Result<Vec<u64>, ServerError> {
        let mut inner = self.lock();
        let now = Instant::now();
        let lost_after = self.config.heartbeat_interval * 3;
        let mut reaped = Vec::new();
        let active: Vec<u64> = inner.state.active.iter().copied().collect();
        for job_id in active {
            let job = &inner.state.jobs[&job_id];
            let deadline = job.claimed_at.and_then(|at| {
                let allowed = self.config.minute * job.spec.timeout_minutes + self.config.deadline_grace;
                chrono::Duration::from_std(allowed).ok().map(|d| at + d)
            });
            let (event, reason) = if now.duration_since(job.last_seen) > lost_after {
                (JobEvent::Completed(Outcome::Failed), "runner_lost")
            } else if deadline.is_some_and(|d| Utc::now() > d) {
                (JobEvent::DeadlineExceeded, "deadline_exceeded")
            } else {
                continue;
            };
            let next = advance(job.state, event)?;
            let (offset, next_seq, artifacts) = (job.log_len, job.next_seq, job.artifacts.clone());
            let started_at = Utc::now();
            let line = format_line(&timestamp_now(), Stage::Internal, reason.as_bytes());
            self.write_log(job_id, offset, &line)?;
            let length = offset + line.len() as u64;
            inner.commit(Record::LogAppended { job_id, next_seq, length })?;
            let result = JobResult {
                stage_results: vec![StageResult {
                    stage: Stage::Internal,
                    status: if next == JobState::TimedOut { StageStatus::TimedOut } else { StageStatus::Failed },
                    exit_code: None,
                    started_at,
                    ended_at: Utc::now().max(started_at),
                    log_range: LogRange { offset, length: line.len() as u64 },
                    note: Some(reason.into()),
                }],
                overall: next.outcome().expect("reaped state is terminal"),
                fingerprint: None,
                artifacts,
                peak_note: None,
            };
            tracing::warn!(job_id, reason, "job reaped");
            self.finish(&mut inner, job_id, next, Some(result))?;
            reaped.push(job_id);
        }
        Ok(reaped)
    }

    /// Makes a job terminal: ledger entry first (fsynced), then the journal.
    fn finish(&self, inner: &mut Inner, job_id: u64, state: JobState, result: Option<JobResult>) -> Result<(), ServerError> {
        let job = &inner.state.jobs[&job_id];
        let log = self.read_log(job_id, job.log_len)?;
        let fingerprint_digest = match result.as_ref().and_then(|r| r.fingerprint.as_ref()) {
            Some(fp) => Some(self.store.put_json(fp)?),
            None => None,
        };
        let entry = LedgerEntry {
            repo_id: job.build.repo_id.clone(),
            commit_id: job.commit_id,
            build_id: job.build.build_id,
            job_id,
            matrix_index: job.spec.matrix_index,
            overall: state.outcome().expect("finish with a terminal state"),
            fingerprint_digest,
            log_digest: self.store.put_blob(&log)?,
            artifact_manifest_digest: self.store.put_blob(&job.artifacts.canonical_bytes())?,
            completed_at: Utc::now(),
        };
        self.store.append_ledger(entry)?;
        inner.commit(Record::JobFinished { job_id, state, result })
    }

    fn write_log(&self, job_id: u64, offset: u64, data: &[u8]) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).write(true).truncate(false).open(self.store.log_path(job_id))?;
        // Drop any unacknowledged tail from an earlier failed attempt.
        f.set_len(offset)?;
        f.seek(SeekFrom::Start(offset))?;
        f.write_all(data)?;
        f.sync_data()
    }

    fn read_log(&self, job_id: u64, len: u64) -> io::Result<Vec<u8>> {
        let mut out = Vec::new();
        match File::open(self.store.log_path(job_id)) {
            Ok(f) => {
                f.take(len).read_to_end(&mut out)?;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound && len == 0 => {}
            Err(e) => return Err(e),
        }
        Ok(out)
    }

    pub fn list_builds(&self, repo_id: &str) -> Vec<BuildView> {
        let inner = self.lock();
        inner.state.builds.keys().filter(|k| k.repo_id == repo_id).map(|k| inner.state.build_view(k)).collect()
    }

    pub fn get_build(&self, key: &BuildRef) -> Result<BuildView, ServerError> {
        let inner = self.lock();
        inner.state.build(key)?;
        Ok(inner.state.build_view(key))
    }

    pub fn get_job(&self, job_id: u64) -> Result<JobView, ServerError> {
        let inner = self.lock();
        let job = inner.state.job(job_id)?;
        Ok(JobView {
            job_id,
            build: job.build.clone(),
            commit_id: job.commit_id,
            matrix_index: job.spec.matrix_index,
            spec: job.spec.clone(),
            state: job.state,
            assigned_runner: job.assigned_runner.clone(),
            cancel_requested: job.cancel_requested,
            log_length: job.log_len,
            artifacts: job.artifacts.clone(),
            result: job.result.clone(),
        })
    }

    /// The acknowledged prefix of a job's log. Read outside the lock; the
    /// file only grows past the length taken under it.
    pub fn get_log(&self, job_id: u64) -> Result<Vec<u8>, ServerError> {
        let len = self.lock().state.job(job_id)?.log_len;
        Ok(self.read_log(job_id, len)?)
    }

    pub fn get_artifact(&self, job_id: u64, path: &str) -> Result<Vec<u8>, ServerError> {
        let digest = {
            let inner = self.lock();
            let job = inner.state.job(job_id)?;
            job.artifacts
                .get(path)
                .map(|e| e.digest)
                .ok_or_else(|| ServerError::NotFound(format!("artifact {path} of job {job_id}")))?
        };
        Ok(self.store.get_blob(&digest)?)
    }

    pub fn get_fingerprint(&self, job_id: u64) -> Result<EnvironmentFingerprint, ServerError> {
        let inner = self.lock();
        let job = inner.state.job(job_id)?;
        if let Some(fp) = job.result.as_ref().and_then(|r| r.fingerprint.clone()) {
            return Ok(fp);
        }
        drop(inner);
        match self.store.ledger().for_job(job_id).and_then(|e| e.fingerprint_digest) {
            Some(d) => Ok(serde_json::from_slice(&self.store.get_blob(&d)?).map_err(StoreError::from)?),
            None => Err(ServerError::NotFound(format!("fingerprint of job {job_id}"))),
        }
    }

    /// Reproducibility report for two finished builds. Builds of different
    /// commits are refused unless `cross_commit` is set.
    pub fn compare(&self, a: &BuildRef, b: &BuildRef, cross_commit: bool) -> Result<ReproReport, ServerError> {
        {
            let inner = self.lock();
            let mut commits = Vec::new();
            for key in [a, b] {
                let build = inner.state.build(key)?;
                let status = inner.state.build_status(build);
                if !status.is_terminal() || status == BuildStatus::ConfigError {
                    return Err(ServerError::NotTerminal(format!("{key} ({status})")));
                }
                commits.push(build.commit_id);
            }
            if commits[0] != commits[1] && !cross_commit {
                return Err(ServerError::CrossCommitRefused);
            }
        }
        Ok(self.store.compare_builds((&a.repo_id, a.build_id), (&b.repo_id, b.build_id))?)
    }

    pub fn scheduler(&self) -> SchedulerState {
        let inner = self.lock();
        SchedulerState {
            parallel_cap: self.config.parallel_cap,
            active: inner.state.active.iter().copied().collect(),
            queued: inner.state.queued.iter().copied().collect(),
        }
    }

    /// Stores a snapshot tarball and returns its commit id.
    pub fn import_snapshot_tar(&self, tar: &[u8]) -> Result<Digest, ServerError> {
        Ok(self.store.snapshot_import_tar(tar)?.1)
    }

    pub fn snapshot_tar(&self, commit: &Digest) -> Result<Vec<u8>, ServerError> {
        if !self.store.has_snapshot(commit) {
            return Err(ServerError::UnknownCommit(*commit));
        }
        Ok(self.store.snapshot_tar(commit)?)
    }
}
