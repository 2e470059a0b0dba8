//! `journal.jsonl`: every server state change, fsynced before it is
//! acknowledged. Replaying it (plus the ledger) rebuilds the coordinator.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::Capabilities;
use crate::config::JobSpec;
use crate::pipeline::{JobResult, JobState, RunnerKind};
use crate::store::{jsonl, ArtifactEntry, Digest, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewJob {
    pub job_id: u64,
    pub spec: JobSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    RunnerRegistered {
        runner_id: String,
        kind: RunnerKind,
        capabilities: Capabilities,
        token_digest: Digest,
        at: DateTime<Utc>,
    },
    BuildCreated {
        repo_id: String,
        build_id: u64,
        commit_id: Digest,
        event_id: Option<String>,
        created_at: DateTime<Utc>,
        config_error: bool,
        diagnostics: Vec<String>,
        jobs: Vec<NewJob>,
    },
    JobClaimed {
        job_id: u64,
        runner_id: String,
        at: DateTime<Utc>,
    },
    JobStarted {
        job_id: u64,
    },
    LogAppended {
        job_id: u64,
        next_seq: u64,
        length: u64,
    },
    ArtifactRecorded {
        job_id: u64,
        entry: ArtifactEntry,
    },
    CancelRequested {
        job_id: u64,
    },
    JobFinished {
        job_id: u64,
        state: JobState,
        result: Option<JobResult>,
    },
}

#[derive(Debug)]
pub struct Journal {
    file: File,
}

impl Journal {
    pub fn open(path: &Path) -> Result<(Self, Vec<Record>), StoreError> {
        let records = jsonl::recover(path, "journal")?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Self { file }, records))
    }

    pub fn append(&mut self, record: &Record) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}
