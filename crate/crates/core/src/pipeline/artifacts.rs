use std::fs;
use std::path::{Path, PathBuf};

use globset::{GlobBuilder, GlobSetBuilder};

use crate::config::ArtifactSpec;
use crate::parallel;
use crate::store::{ArtifactEntry, ArtifactManifest, Digest, StoreError};

/// A matched file: its manifest entry plus where it lives on disk.
#[derive(Debug, Clone)]
pub struct CollectedFile {
    pub entry: ArtifactEntry,
    pub source: PathBuf,
}

/// Evaluates artifact globs against the workspace. Patterns are matched
/// against `/`-separated relative paths; `*` does not cross directories,
/// `**` does. Symlinks are never followed.
pub fn collect_artifacts(
    workspace: &Path,
    spec: &ArtifactSpec,
    job_id: u64,
) -> Result<(ArtifactManifest, Vec<CollectedFile>), StoreError> {
    if spec.patterns.is_empty() {
        return Ok((ArtifactManifest::new(job_id, Vec::new())?, Vec::new()));
    }
    let mut builder = GlobSetBuilder::new();
    for p in &spec.patterns {
        let glob = GlobBuilder::new(p)
            .literal_separator(true)
            .build()
            .map_err(|e| StoreError::PathRejected(format!("artifact pattern `{p}`: {e}")))?;
        builder.add(glob);
    }
    let set = builder
        .build()
        .map_err(|e| StoreError::PathRejected(e.to_string()))?;

    let mut matched = Vec::new();
    for entry in walkdir::WalkDir::new(workspace).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(|e| StoreError::Io(e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(workspace).expect("under workspace");
        let Some(rel) = rel.to_str() else { continue };
        let rel = rel.replace(std::path::MAIN_SEPARATOR, "/");
        if set.is_match(&rel) {
            matched.push((rel, entry.path().to_path_buf()));
        }
    }

    let digests = parallel::map(&matched, |(_, abs)| -> Result<(u64, Digest), StoreError> {
        let size = fs::metadata(abs)?.len();
        Ok((size, Digest::of_reader(fs::File::open(abs)?)?))
    });
    let mut files = Vec::with_capacity(matched.len());
    for ((path, source), d) in matched.into_iter().zip(digests) {
        let (size, digest) = d?;
        files.push(CollectedFile { entry: ArtifactEntry { path, size, digest }, source });
    }
    let manifest = ArtifactManifest::new(job_id, files.iter().map(|f| f.entry.clone()).collect())?;
    Ok((manifest, files))
}
