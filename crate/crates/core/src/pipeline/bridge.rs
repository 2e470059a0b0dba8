//! Batch-bridge backend: each stage becomes one batch submission to a
//! cluster scheduler; the runner polls it and relays the output.
//!
//! The bundled [`SimulatedScheduler`] is deterministic: its clock advances
//! one tick per `poll` of a batch, so a test can predict every state.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::backend::{
    run_commands, BackendIdentity, ExecError, ExecutorBackend, HostFacts, LocalBackend,
    StageControl, StageOutcome, StageRequest,
};
use super::process::CancelToken;
use crate::config::Stage;

pub type BatchId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub stage: Stage,
    pub workspace: PathBuf,
    pub commands: Vec<String>,
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchState {
    Pending,
    Running,
    Done(i32),
    Lost,
    Canceled,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BatchError {
    #[error("submission refused: {0}")]
    SubmissionRefused(String),
    #[error("unknown batch {0}")]
    UnknownBatch(BatchId),
}

/// The narrow adapter boundary to a batch scheduler.
pub trait BatchScheduler: Send + Sync {
    fn submit(&self, plan: BatchPlan) -> Result<BatchId, BatchError>;
    fn poll(&self, id: BatchId) -> Result<BatchState, BatchError>;
    /// Output lines in the order the batch produced them.
    fn fetch_output(&self, id: BatchId) -> Result<Vec<Vec<u8>>, BatchError>;
    fn cancel(&self, id: BatchId) -> Result<(), BatchError>;
}

/// Simulated scheduler settings; also the JSON config file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatedConfig {
    /// Poll interval the bridge uses against this scheduler.
    pub tick_ms: u64,
    /// Maximum concurrently running batches; 0 refuses every submission.
    pub capacity: usize,
    /// Batches with submission index `>= drop_after` are lost instead of run.
    pub drop_after: Option<u64>,
    /// Polls a batch stays pending before it may start.
    pub delay_ticks: u32,
}

impl Default for SimulatedConfig {
    fn default() -> Self {
        Self { tick_ms: 50, capacity: 4, drop_after: None, delay_ticks: 1 }
    }
}

struct SimBatch {
    plan: Option<BatchPlan>,
    index: u64,
    ticks: u32,
    state: BatchState,
    history: Vec<BatchState>,
    output: Arc<Mutex<Vec<Vec<u8>>>>,
    result: Arc<Mutex<Option<BatchState>>>,
    cancel: CancelToken,
}

#[derive(Default)]
struct SimInner {
    next_id: BatchId,
    submitted: u64,
    batches: HashMap<BatchId, SimBatch>,
}

pub struct SimulatedScheduler {
    config: SimulatedConfig,
    inner: Mutex<SimInner>,
}

impl SimulatedScheduler {
    pub fn new(config: SimulatedConfig) -> Self {
        Self { config, inner: Mutex::new(SimInner::default()) }
    }

    pub fn config(&self) -> &SimulatedConfig {
        &self.config
    }

    /// Every state returned by `poll` for this batch, in order.
    pub fn history(&self, id: BatchId) -> Vec<BatchState> {
        let inner = self.inner.lock().expect("scheduler lock poisoned");
        inner.batches.get(&id).map(|b| b.history.clone()).unwrap_or_default()
    }

    fn start(batch: &mut SimBatch) {
        let plan = batch.plan.take().expect("pending batch keeps its plan");
        let output = batch.output.clone();
        let result = batch.result.clone();
        let cancel = batch.cancel.clone();
        thread::spawn(move || {
            let req = StageRequest {
                workspace: &plan.workspace,
                stage: plan.stage,
                commands: &plan.commands,
                env: &plan.env,
            };
            let ctl = StageControl {
                // The bridge owns the job deadline and cancels the batch itself.
                deadline: Instant::now() + Duration::from_secs(365 * 24 * 3600),
                cancel,
                grace: Duration::from_secs(5),
            };
            let mut sink = |line: &[u8]| output.lock().expect("output lock").push(line.to_vec());
            let end = match run_commands(&req, &mut sink, &ctl) {
                Ok(StageOutcome::Exited(code)) => BatchState::Done(code),
                Ok(StageOutcome::Canceled) => BatchState::Canceled,
                Ok(_) | Err(_) => BatchState::Lost,
            };
            *result.lock().expect("result lock") = Some(end);
        });
    }
}

impl BatchScheduler for SimulatedScheduler {
    fn submit(&self, plan: BatchPlan) -> Result<BatchId, BatchError> {
        if self.config.capacity == 0 {
            return Err(BatchError::SubmissionRefused("scheduler has no capacity".into()));
        }
        let mut inner = self.inner.lock().expect("scheduler lock poisoned");
        let id = inner.next_id;
        inner.next_id += 1;
        let index = inner.submitted;
        inner.submitted += 1;
        inner.batches.insert(
            id,
            SimBatch {
                plan: Some(plan),
                index,
                ticks: 0,
                state: BatchState::Pending,
                history: Vec::new(),
                output: Arc::default(),
                result: Arc::default(),
                cancel: CancelToken::new(),
            },
        );
        Ok(id)
    }

    fn poll(&self, id: BatchId) -> Result<BatchState, BatchError> {
        let mut inner = self.inner.lock().expect("scheduler lock poisoned");
        let running = inner.batches.values().filter(|b| b.state == BatchState::Running).count();
        let batch = inner.batches.get_mut(&id).ok_or(BatchError::UnknownBatch(id))?;
        batch.ticks += 1;
        match batch.state {
            BatchState::Pending if batch.ticks >= self.config.delay_ticks && running < self.config.capacity => {
                if self.config.drop_after.is_some_and(|n| batch.index >= n) {
                    batch.plan = None;
                    batch.state = BatchState::Lost;
                } else {
                    Self::start(batch);
                    batch.state = BatchState::Running;
                }
            }
            BatchState::Running => {
                if let Some(end) = *batch.result.lock().expect("result lock") {
                    batch.state = end;
                }
            }
            _ => {}
        }
        batch.history.push(batch.state);
        Ok(batch.state)
    }

    fn fetch_output(&self, id: BatchId) -> Result<Vec<Vec<u8>>, BatchError> {
        let inner = self.inner.lock().expect("scheduler lock poisoned");
        let batch = inner.batches.get(&id).ok_or(BatchError::UnknownBatch(id))?;
        let lines = batch.output.lock().expect("output lock").clone();
        Ok(lines)
    }

    fn cancel(&self, id: BatchId) -> Result<(), BatchError> {
        let mut inner = self.inner.lock().expect("scheduler lock poisoned");
        let batch = inner.batches.get_mut(&id).ok_or(BatchError::UnknownBatch(id))?;
        batch.cancel.cancel();
        if batch.state == BatchState::Pending {
            batch.plan = None;
            batch.state = BatchState::Canceled;
        }
        Ok(())
    }
}

/// Backend that submits each stage to a [`BatchScheduler`].
///
/// Machine facts and toolchain probes describe the head node (this process).
pub struct BatchBridgeBackend {
    scheduler: Arc<dyn BatchScheduler>,
    head: LocalBackend,
    poll_interval: Duration,
}

impl BatchBridgeBackend {
    pub fn new(scheduler: Arc<dyn BatchScheduler>, head: LocalBackend, poll_interval: Duration) -> Self {
        Self { scheduler, head, poll_interval }
    }

    pub fn simulated(config: SimulatedConfig, head: LocalBackend) -> (Self, Arc<SimulatedScheduler>) {
        let poll = Duration::from_millis(config.tick_ms);
        let sim = Arc::new(SimulatedScheduler::new(config));
        (Self::new(sim.clone(), head, poll), sim)
    }

    fn wait_terminal(&self, id: BatchId, ctl: &StageControl) -> Result<BatchState, BatchError> {
        loop {
            let state = self.scheduler.poll(id)?;
            match state {
                BatchState::Pending | BatchState::Running => {}
                end => return Ok(end),
            }
            if ctl.cancel.is_canceled() || Instant::now() >= ctl.deadline {
                self.scheduler.cancel(id)?;
                // Wait for the batch to wind down so its output is complete.
                while let BatchState::Pending | BatchState::Running = self.scheduler.poll(id)? {
                    thread::sleep(self.poll_interval);
                }
                return Ok(if ctl.cancel.is_canceled() { BatchState::Canceled } else { BatchState::Lost });
            }
            thread::sleep(self.poll_interval);
        }
    }
}

impl ExecutorBackend for BatchBridgeBackend {
    fn identity(&self) -> BackendIdentity {
        let mut id = self.head.identity();
        id.name = "batch_bridge".into();
        id.tags.push("batch_bridge".into());
        id
    }

    fn host_facts(&self) -> Result<HostFacts, ExecError> {
        self.head.host_facts()
    }

    fn probe_toolchain(&self, language: &str) -> Option<String> {
        self.head.probe_toolchain(language)
    }

    fn execute(
        &self,
        req: &StageRequest<'_>,
        out: &mut dyn FnMut(&[u8]),
        ctl: &StageControl,
    ) -> Result<StageOutcome, ExecError> {
        if !req.workspace.is_dir() {
            return Err(ExecError::WorkspaceMissing(req.workspace.display().to_string()));
        }
        let plan = BatchPlan {
            stage: req.stage,
            workspace: req.workspace.to_path_buf(),
            commands: req.commands.to_vec(),
            env: req.env.clone(),
        };
        let id = match self.scheduler.submit(plan) {
            Ok(id) => id,
            Err(BatchError::SubmissionRefused(why)) => {
                return Ok(StageOutcome::Lost(format!("submission_refused: {why}")))
            }
            Err(e) => return Err(ExecError::BackendUnavailable(e.to_string())),
        };
        let deadline_hit = |ctl: &StageControl| Instant::now() >= ctl.deadline;
        let end = self
            .wait_terminal(id, ctl)
            .map_err(|e| ExecError::BackendUnavailable(e.to_string()))?;
        let lines = self
            .scheduler
            .fetch_output(id)
            .map_err(|e| ExecError::BackendUnavailable(e.to_string()))?;
        for line in &lines {
            out(line);
        }
        Ok(match end {
            BatchState::Done(code) => StageOutcome::Exited(code),
            BatchState::Canceled if ctl.cancel.is_canceled() => StageOutcome::Canceled,
            BatchState::Lost if deadline_hit(ctl) => StageOutcome::TimedOut,
            BatchState::Canceled => StageOutcome::Canceled,
            BatchState::Lost | BatchState::Pending | BatchState::Running => {
                StageOutcome::Lost("batch_lost".into())
            }
        })
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;

    fn plan(dir: &std::path::Path, cmds: &[&str]) -> BatchPlan {
        BatchPlan {
            stage: Stage::Run,
            workspace: dir.to_path_buf(),
            commands: cmds.iter().map(|s| s.to_string()).collect(),
            env: BTreeMap::new(),
        }
    }

    fn poll_to_end(sim: &SimulatedScheduler, id: BatchId) -> usize {
        for n in 1..10_000 {
            match sim.poll(id).unwrap() {
                BatchState::Pending | BatchState::Running => thread::sleep(Duration::from_millis(5)),
                _ => return n,
            }
        }
        panic!("batch never finished");
    }

    #[test]
    fn delay_ticks_observed_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let sim = SimulatedScheduler::new(SimulatedConfig { delay_ticks: 3, ..Default::default() });
        let id = sim.submit(plan(dir.path(), &["echo hi"])).unwrap();
        let polls = poll_to_end(&sim, id);
        assert!(polls >= 3, "finished after {polls} polls");
        let h = sim.history(id);
        assert_eq!(&h[..3], [BatchState::Pending, BatchState::Pending, BatchState::Running]);
        assert_eq!(*h.last().unwrap(), BatchState::Done(0));
        // pending -> running -> done, never backwards.
        let rank = |s: &BatchState| match s {
            BatchState::Pending => 0,
            BatchState::Running => 1,
            _ => 2,
        };
        assert!(h.windows(2).all(|w| rank(&w[0]) <= rank(&w[1])));
        assert_eq!(sim.fetch_output(id).unwrap(), vec![b"hi".to_vec()]);
    }

    #[test]
    fn drop_after_loses_batches() {
        let dir = tempfile::tempdir().unwrap();
        let sim = SimulatedScheduler::new(SimulatedConfig { drop_after: Some(1), ..Default::default() });
        let a = sim.submit(plan(dir.path(), &["true"])).unwrap();
        let b = sim.submit(plan(dir.path(), &["true"])).unwrap();
        poll_to_end(&sim, a);
        poll_to_end(&sim, b);
        assert_eq!(*sim.history(a).last().unwrap(), BatchState::Done(0));
        assert_eq!(*sim.history(b).last().unwrap(), BatchState::Lost);
    }

    #[test]
    fn zero_capacity_refuses() {
        let dir = tempfile::tempdir().unwrap();
        let sim = SimulatedScheduler::new(SimulatedConfig { capacity: 0, ..Default::default() });
        assert!(matches!(sim.submit(plan(dir.path(), &["true"])), Err(BatchError::SubmissionRefused(_))));
    }

    #[test]
    fn config_json_fields() {
        let c: SimulatedConfig = serde_json::from_str(r#"{"tick_ms": 10, "capacity": 2, "drop_after": 5}"#).unwrap();
        assert_eq!(c, SimulatedConfig { tick_ms: 10, capacity: 2, drop_after: Some(5), delay_ticks: 1 });
    }

    #[test]
    fn bridge_relays_output_and_exit() {
        let dir = tempfile::tempdir().unwrap();
        let (bridge, _) = BatchBridgeBackend::simulated(
            SimulatedConfig { tick_ms: 5, ..Default::default() },
            LocalBackend::new(super::super::RunnerKind::Selfhosted),
        );
        let env = BTreeMap::new();
        let cmds = vec!["echo one".to_string(), "echo two".to_string(), "exit 4".to_string(), "echo never".to_string()];
        let mut lines = Vec::new();
        let outcome = bridge
            .execute(
                &StageRequest { workspace: dir.path(), stage: Stage::Run, commands: &cmds, env: &env },
                &mut |l| lines.push(String::from_utf8_lossy(l).into_owned()),
                &StageControl { deadline: Instant::now() + Duration::from_secs(30), cancel: CancelToken::new(), grace: Duration::from_secs(5) },
            )
            .unwrap();
        assert_eq!(outcome, StageOutcome::Exited(4));
        assert_eq!(lines, ["one", "two"]);
    }
}
