//! Durable, content-addressed persistence.
//!
//! Layout under the data directory:
//!
//! ```text
//! blobs/<first 2 hex>/<remaining 62 hex>
//! ledger.jsonl
//! logs/<job_id>.log
//! snapshots/<commit_id>.manifest
//! ```

mod artifact;
mod blob;
mod compare;
mod digest;
pub(crate) mod jsonl;
mod ledger;
pub mod snapshot;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use artifact::{ArtifactEntry, ArtifactManifest};
pub use blob::BlobStore;
pub use compare::{
    compare_jobs, FieldDiff, JobComparison, JobRecord, PathComparison, PathVerdict, ReproReport,
    Verdict,
};
pub use digest::{Digest, ParseDigestError};
pub use ledger::{Ledger, LedgerEntry};
pub use snapshot::{validate_relative_path, FileMode, SnapshotEntry, SnapshotManifest};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("blob {0} failed digest verification")]
    CorruptBlob(Digest),
    #[error("path rejected: {0}")]
    PathRejected(String),
    #[error("job {0} already has a ledger entry")]
    DuplicateJob(u64),
    #[error("build is not terminal: {0}")]
    NotTerminal(String),
    #[error("builds have different matrix shapes ({a} vs {b} jobs)")]
    MatrixShapeMismatch { a: usize, b: usize },
    #[error("digest mismatch: expected {expected}, found {actual}")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    blobs: BlobStore,
    ledger: Ledger,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("logs"))?;
        fs::create_dir_all(root.join("snapshots"))?;
        let blobs = BlobStore::open(root.join("blobs"))?;
        let ledger = Ledger::open(root.join("ledger.jsonl"))?;
        Ok(Self { root, blobs, ledger })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn put_blob(&self, bytes: &[u8]) -> Result<Digest, StoreError> {
        self.blobs.put(bytes)
    }

    pub fn get_blob(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        self.blobs.get(digest)
    }

    pub fn put_json<T: Serialize>(&self, value: &T) -> Result<Digest, StoreError> {
        self.blobs.put(&serde_json::to_vec(value)?)
    }

    pub fn log_path(&self, job_id: u64) -> PathBuf {
        self.root.join("logs").join(format!("{job_id}.log"))
    }

    fn manifest_path(&self, commit: &Digest) -> PathBuf {
        self.root.join("snapshots").join(format!("{commit}.manifest"))
    }

    fn record_snapshot(&self, manifest: SnapshotManifest) -> Result<(SnapshotManifest, Digest), StoreError> {
        let bytes = manifest.canonical_bytes();
        let commit = Digest::of(&bytes);
        let path = self.manifest_path(&commit);
        if !path.is_file() {
            let mut tmp = tempfile::NamedTempFile::new_in(self.root.join("snapshots"))?;
            std::io::Write::write_all(&mut tmp, &bytes)?;
            tmp.as_file().sync_all()?;
            tmp.persist(&path).map_err(|e| StoreError::Io(e.error))?;
        }
        Ok((manifest, commit))
    }

    pub fn snapshot_import_dir(&self, dir: &Path) -> Result<(SnapshotManifest, Digest), StoreError> {
        let manifest = snapshot::import_dir(&self.blobs, dir)?;
        self.record_snapshot(manifest)
    }

    pub fn snapshot_import_tar(&self, reader: impl Read) -> Result<(SnapshotManifest, Digest), StoreError> {
        let manifest = snapshot::import_tar(&self.blobs, reader)?;
        self.record_snapshot(manifest)
    }

    pub fn has_snapshot(&self, commit: &Digest) -> bool {
        self.manifest_path(commit).is_file()
    }

    pub fn load_snapshot(&self, commit: &Digest) -> Result<SnapshotManifest, StoreError> {
        let bytes = match fs::read(self.manifest_path(commit)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(format!("snapshot {commit}")))
            }
            Err(e) => return Err(e.into()),
        };
        let actual = Digest::of(&bytes);
        if actual != *commit {
            return Err(StoreError::DigestMismatch { expected: *commit, actual });
        }
        SnapshotManifest::parse(&bytes)
    }

    pub fn snapshot_export(&self, commit: &Digest, target: &Path) -> Result<(), StoreError> {
        let manifest = self.load_snapshot(commit)?;
        snapshot::export(&self.blobs, &manifest, target)
    }

    pub fn snapshot_tar(&self, commit: &Digest) -> Result<Vec<u8>, StoreError> {
        let manifest = self.load_snapshot(commit)?;
        let mut out = Vec::new();
        snapshot::write_tar(&self.blobs, &manifest, &mut out)?;
        Ok(out)
    }

    /// Reads one file of a stored snapshot; `None` if the path is absent.
    pub fn read_snapshot_file(&self, commit: &Digest, path: &str) -> Result<Option<Vec<u8>>, StoreError> {
        let manifest = self.load_snapshot(commit)?;
        match manifest.get(path) {
            Some(e) => Ok(Some(self.blobs.get(&e.digest)?)),
            None => Ok(None),
        }
    }

    pub fn append_ledger(&self, entry: LedgerEntry) -> Result<(), StoreError> {
        self.ledger.append(entry)
    }

    pub fn query_ledger(&self, repo_id: &str, commit_id: &Digest) -> Vec<LedgerEntry> {
        self.ledger.query(repo_id, commit_id)
    }

    /// Loads the stored artifact manifest and fingerprint behind a ledger entry.
    pub fn job_record(&self, entry: &LedgerEntry) -> Result<JobRecord, StoreError> {
        let artifacts = ArtifactManifest::parse_canonical(
            entry.job_id,
            &self.blobs.get(&entry.artifact_manifest_digest)?,
        )?;
        let fingerprint = match entry.fingerprint_digest {
            Some(d) => Some(serde_json::from_slice(&self.blobs.get(&d)?)?),
            None => None,
        };
        Ok(JobRecord {
            job_id: entry.job_id,
            matrix_index: entry.matrix_index,
            overall: entry.overall,
            artifacts,
            fingerprint,
        })
    }

    /// Compares two builds from their ledger entries. Callers that know the
    /// job count should check that both builds are terminal first.
    pub fn compare_builds(
        &self,
        (repo_a, build_a): (&str, u64),
        (repo_b, build_b): (&str, u64),
    ) -> Result<ReproReport, StoreError> {
        let load = |repo: &str, build: u64| -> Result<(Digest, Vec<JobRecord>), StoreError> {
            let entries = self.ledger.for_build(repo, build);
            let first = entries
                .first()
                .ok_or_else(|| StoreError::NotTerminal(format!("{repo}:{build} has no finished jobs")))?;
            let commit = first.commit_id;
            let records = entries.iter().map(|e| self.job_record(e)).collect::<Result<_, _>>()?;
            Ok((commit, records))
        };
        let (commit_a, jobs_a) = load(repo_a, build_a)?;
        let (commit_b, jobs_b) = load(repo_b, build_b)?;
        let (pairs, verdict) = compare_jobs(&jobs_a, &jobs_b)?;
        Ok(ReproReport {
            build_a: format!("{repo_a}:{build_a}"),
            build_b: format!("{repo_b}:{build_b}"),
            commit_a,
            commit_b,
            pairs,
            verdict,
        })
    }
}
