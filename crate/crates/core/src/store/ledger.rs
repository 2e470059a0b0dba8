//! Append-only reproducibility ledger (`ledger.jsonl`).
//!
//! One JSON object per line, fsynced before `append` returns. On open, a torn
//! final line left by a crash mid-write is cut off; every complete line is kept.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Digest, StoreError};
use crate::pipeline::Outcome;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub repo_id: String,
    pub commit_id: Digest,
    pub build_id: u64,
    pub job_id: u64,
    pub matrix_index: u32,
    pub overall: Outcome,
    /// Absent for jobs that never reached a runner (e.g. canceled while queued).
    pub fingerprint_digest: Option<Digest>,
    pub log_digest: Digest,
    pub artifact_manifest_digest: Digest,
    pub completed_at: DateTime<Utc>,
}

#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    entries: RwLock<Vec<LedgerEntry>>,
    jobs: Mutex<HashSet<u64>>,
    writer: Mutex<File>,
}

impl Ledger {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let entries: Vec<LedgerEntry> = super::jsonl::recover(&path, "ledger")?;
        let jobs = entries.iter().map(|e| e.job_id).collect();
        let writer = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            jobs: Mutex::new(jobs),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: LedgerEntry) -> Result<(), StoreError> {
        let mut jobs = self.jobs.lock().expect("ledger lock poisoned");
        if jobs.contains(&entry.job_id) {
            return Err(StoreError::DuplicateJob(entry.job_id));
        }
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        {
            let mut w = self.writer.lock().expect("ledger lock poisoned");
            w.write_all(&line)?;
            w.sync_data()?;
        }
        jobs.insert(entry.job_id);
        self.entries.write().expect("ledger lock poisoned").push(entry);
        Ok(())
    }

    /// All runs of one commit, in completion order.
    pub fn query(&self, repo_id: &str, commit_id: &Digest) -> Vec<LedgerEntry> {
        self.entries
            .read()
            .expect("ledger lock poisoned")
            .iter()
            .filter(|e| e.repo_id == repo_id && e.commit_id == *commit_id)
            .cloned()
            .collect()
    }

    pub fn for_build(&self, repo_id: &str, build_id: u64) -> Vec<LedgerEntry> {
        self.entries
            .read()
            .expect("ledger lock poisoned")
            .iter()
            .filter(|e| e.repo_id == repo_id && e.build_id == build_id)
            .cloned()
            .collect()
    }

    pub fn for_job(&self, job_id: u64) -> Option<LedgerEntry> {
        self.entries
            .read()
            .expect("ledger lock poisoned")
            .iter()
            .find(|e| e.job_id == job_id)
            .cloned()
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.read().expect("ledger lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("ledger lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
