//! Canonical source snapshots.
//!
//! A snapshot is the sorted list of `(path, mode, content digest)` for every
//! regular file in a tree. Its identity (the commit id) is the SHA-256 of the
//! canonical serialization, one line per entry:
//!
//! ```text
//! <100644|100755> <hex digest> <path>\n
//! ```
//!
//! Timestamps, ownership and empty directories are not part of the identity.

use std::fs;
use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlobStore, Digest, StoreError};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileMode {
    Regular,
    Executable,
}

impl FileMode {
    pub fn octal(self) -> &'static str {
        match self {
            FileMode::Regular => "100644",
            FileMode::Executable => "100755",
        }
    }

    fn from_octal(s: &str) -> Option<Self> {
        match s {
            "100644" => Some(FileMode::Regular),
            "100755" => Some(FileMode::Executable),
            _ => None,
        }
    }

    pub fn permissions(self) -> u32 {
        match self {
            FileMode::Regular => 0o644,
            FileMode::Executable => 0o755,
        }
    }

    pub fn from_permissions(bits: u32) -> Self {
        if bits & 0o111 != 0 {
            FileMode::Executable
        } else {
            FileMode::Regular
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub path: String,
    pub mode: FileMode,
    pub digest: Digest,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub entries: Vec<SnapshotEntry>,
}

/// Checks that `path` is a relative, normalized, `/`-separated path that
/// cannot escape its root.
pub fn validate_relative_path(path: &str) -> Result<(), StoreError> {
    let reject = |why: &str| Err(StoreError::PathRejected(format!("{path:?}: {why}")));
    if path.is_empty() {
        return reject("empty path");
    }
    if path.contains('\n') || path.contains('\0') {
        return reject("control character in path");
    }
    if path.starts_with('/') || Path::new(path).is_absolute() {
        return reject("absolute path");
    }
    for seg in path.split('/') {
        match seg {
            "" => return reject("empty path segment"),
            "." => return reject("`.` segment"),
            ".." => return reject("`..` segment"),
            _ => {}
        }
    }
    Ok(())
}

impl SnapshotManifest {
    /// Builds a manifest, sorting entries bytewise and rejecting bad paths.
    pub fn new(mut entries: Vec<SnapshotEntry>) -> Result<Self, StoreError> {
        for e in &entries {
            validate_relative_path(&e.path)?;
        }
        entries.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
        for pair in entries.windows(2) {
            if pair[0].path == pair[1].path {
                return Err(StoreError::PathRejected(format!(
                    "duplicate path {:?}",
                    pair[0].path
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(e.mode.octal().as_bytes());
            out.push(b' ');
            out.extend_from_slice(e.digest.to_hex().as_bytes());
            out.push(b' ');
            out.extend_from_slice(e.path.as_bytes());
            out.push(b'\n');
        }
        out
    }

    /// The commit id.
    pub fn digest(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, StoreError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| StoreError::Malformed("snapshot manifest is not UTF-8".into()))?;
        let mut entries = Vec::new();
        for (i, line) in text.split_terminator('\n').enumerate() {
            let bad = || StoreError::Malformed(format!("snapshot manifest line {}", i + 1));
            let mut parts = line.splitn(3, ' ');
            let mode = parts.next().and_then(FileMode::from_octal).ok_or_else(bad)?;
            let digest = parts
                .next()
                .and_then(|d| d.parse().ok())
                .ok_or_else(bad)?;
            let path = parts.next().ok_or_else(bad)?.to_string();
            entries.push(SnapshotEntry { path, mode, digest });
        }
        let manifest = Self::new(entries)?;
        if manifest.canonical_bytes() != bytes {
            return Err(StoreError::Malformed(
                "snapshot manifest is not in canonical form".into(),
            ));
        }
        Ok(manifest)
    }

    pub fn get(&self, path: &str) -> Option<&SnapshotEntry> {
        self.entries
            .binary_search_by(|e| e.path.as_bytes().cmp(path.as_bytes()))
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Top-level directories left out of snapshots: version control metadata
/// and the default local data dir.
pub const IGNORED_DIRS: &[&str] = &[".git", ".labci"];

fn is_ignored_dir(name: &std::ffi::OsStr) -> bool {
    IGNORED_DIRS.iter().any(|d| name == *d)
}

struct FoundFile {
    rel: String,
    abs: PathBuf,
    mode: FileMode,
}

fn list_files(dir: &Path) -> Result<Vec<FoundFile>, StoreError> {
    if !dir.is_dir() {
        return Err(StoreError::NotFound(format!("directory {}", dir.display())));
    }
    let mut found = Vec::new();
    let walk = walkdir::WalkDir::new(dir)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| !(e.depth() == 1 && e.file_type().is_dir() && is_ignored_dir(e.file_name())));
    for entry in walk {
        let entry = entry.map_err(|e| StoreError::Io(e.into()))?;
        let ft = entry.file_type();
        if ft.is_dir() {
            continue;
        }
        let rel_path = entry
            .path()
            .strip_prefix(dir)
            .expect("walkdir yields paths under its root");
        let rel = rel_to_string(rel_path)?;
        if !ft.is_file() {
            return Err(StoreError::PathRejected(format!(
                "{rel:?}: only regular files can be snapshotted"
            )));
        }
        let mode = FileMode::from_permissions(file_permissions(&entry.metadata().map_err(|e| StoreError::Io(e.into()))?));
        found.push(FoundFile {
            rel,
            abs: entry.path().to_path_buf(),
            mode,
        });
    }
    Ok(found)
}

fn rel_to_string(rel: &Path) -> Result<String, StoreError> {
    let mut parts = Vec::new();
    for c in rel.components() {
        match c {
            Component::Normal(s) => parts.push(s.to_str().ok_or_else(|| {
                StoreError::PathRejected(format!("{}: path is not UTF-8", rel.display()))
            })?),
            _ => {
                return Err(StoreError::PathRejected(format!(
                    "{}: unexpected path component",
                    rel.display()
                )))
            }
        }
    }
    Ok(parts.join("/"))
}

#[cfg(unix)]
fn file_permissions(meta: &fs::Metadata) -> u32 {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode()
}

#[cfg(not(unix))]
fn file_permissions(_meta: &fs::Metadata) -> u32 {
    0o644
}

#[cfg(unix)]
fn set_mode(path: &Path, mode: FileMode) -> std::io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(mode.permissions()))
}

#[cfg(not(unix))]
fn set_mode(_path: &Path, _mode: FileMode) -> std::io::Result<()> {
    Ok(())
}

/// Computes the manifest of a directory tree without storing anything.
pub fn manifest_of_dir(dir: &Path) -> Result<SnapshotManifest, StoreError> {
    let files = list_files(dir)?;
    let digests = parallel::map(&files, |f| {
        fs::File::open(&f.abs).and_then(Digest::of_reader)
    });
    collect_manifest(files, digests)
}

/// Imports a directory tree: every file goes into `blobs`.
pub fn import_dir(blobs: &BlobStore, dir: &Path) -> Result<SnapshotManifest, StoreError> {
    let files = list_files(dir)?;
    let digests = parallel::map(&files, |f| blobs.put_file(&f.abs));
    collect_manifest(files, digests)
}

fn collect_manifest<E>(
    files: Vec<FoundFile>,
    digests: Vec<Result<Digest, E>>,
) -> Result<SnapshotManifest, StoreError>
where
    StoreError: From<E>,
{
    let mut entries = Vec::with_capacity(files.len());
    for (f, d) in files.into_iter().zip(digests) {
        entries.push(SnapshotEntry {
            path: f.rel,
            mode: f.mode,
            digest: d?,
        });
    }
    SnapshotManifest::new(entries)
}

/// Imports a tar archive. Only regular files and directories are accepted.
pub fn import_tar(blobs: &BlobStore, reader: impl Read) -> Result<SnapshotManifest, StoreError> {
    let mut archive = tar::Archive::new(reader);
    let mut entries = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let kind = entry.header().entry_type();
        let raw = entry.path_bytes().into_owned();
        let path = String::from_utf8(raw)
            .map_err(|_| StoreError::PathRejected("tar entry path is not UTF-8".into()))?;
        let path = path.trim_start_matches("./").trim_end_matches('/').to_string();
        if kind.is_dir() {
            continue;
        }
        if !kind.is_file() {
            return Err(StoreError::PathRejected(format!(
                "{path:?}: only regular files can be snapshotted"
            )));
        }
        validate_relative_path(&path)?;
        let mode = FileMode::from_permissions(entry.header().mode()?);
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        let digest = blobs.put(&bytes)?;
        entries.push(SnapshotEntry { path, mode, digest });
    }
    SnapshotManifest::new(entries)
}

/// Writes a deterministic tar of the snapshot: fixed mtime, uid and gid.
pub fn write_tar(
    blobs: &BlobStore,
    manifest: &SnapshotManifest,
    writer: impl Write,
) -> Result<(), StoreError> {
    let mut builder = tar::Builder::new(writer);
    builder.mode(tar::HeaderMode::Deterministic);
    for e in &manifest.entries {
        let bytes = blobs.get(&e.digest)?;
        let mut header = tar::Header::new_gnu();
        header.set_entry_type(tar::EntryType::Regular);
        header.set_size(bytes.len() as u64);
        header.set_mode(e.mode.permissions());
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        builder.append_data(&mut header, &e.path, bytes.as_slice())?;
    }
    builder.into_inner()?.flush()?;
    Ok(())
}

/// Writes the same deterministic tar as [`write_tar`] straight from a
/// directory, for uploading a snapshot without a local store.
pub fn tar_dir(dir: &Path, writer: impl Write) -> Result<Digest, StoreError> {
    let manifest = manifest_of_dir(dir)?;
    let mut builder = tar::Builder::new(writer);
    builder.mode(tar::HeaderMode::Deterministic);
    for e in &manifest.entries {
        let bytes = fs::read(dir.join(&e.path))?;
        let actual = Digest::of(&bytes);
        if actual != e.digest {
            return Err(StoreError::DigestMismatch { expected: e.digest, actual });
        }
        let mut header = tar::Header::new_gnu();
        header.set_entry_type(tar::EntryType::Regular);
        header.set_size(bytes.len() as u64);
        header.set_mode(e.mode.permissions());
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        builder.append_data(&mut header, &e.path, bytes.as_slice())?;
    }
    builder.into_inner()?.flush()?;
    Ok(manifest.digest())
}

/// Extracts a tar into `target` with the same validation as [`import_tar`],
/// without touching any store.
pub fn extract_tar(reader: impl Read, target: &Path) -> Result<(), StoreError> {
    let mut archive = tar::Archive::new(reader);
    for entry in archive.entries()? {
        let mut entry = entry?;
        let kind = entry.header().entry_type();
        let path = String::from_utf8(entry.path_bytes().into_owned())
            .map_err(|_| StoreError::PathRejected("tar entry path is not UTF-8".into()))?;
        let path = path.trim_start_matches("./").trim_end_matches('/').to_string();
        if kind.is_dir() {
            continue;
        }
        if !kind.is_file() {
            return Err(StoreError::PathRejected(format!(
                "{path:?}: only regular files can be snapshotted"
            )));
        }
        validate_relative_path(&path)?;
        let mode = FileMode::from_permissions(entry.header().mode()?);
        let dest = target.join(&path);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = fs::File::create(&dest)?;
        std::io::copy(&mut entry, &mut out)?;
        set_mode(&dest, mode)?;
    }
    Ok(())
}

/// Materializes the snapshot under `target` (created if missing).
pub fn export(
    blobs: &BlobStore,
    manifest: &SnapshotManifest,
    target: &Path,
) -> Result<(), StoreError> {
    fs::create_dir_all(target)?;
    for e in &manifest.entries {
        let dest = target.join(&e.path);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&dest, blobs.get(&e.digest)?)?;
        set_mode(&dest, e.mode)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(root: &Path, rel: &str, bytes: &[u8], exec: bool) {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(&p, bytes).unwrap();
        set_mode(&p, if exec { FileMode::Executable } else { FileMode::Regular }).unwrap();
    }

    #[test]
    fn canonical_form_is_bit_exact() {
        let tree = tempfile::tempdir().unwrap();
        write(tree.path(), "sub/b.sh", b"#!/bin/sh\necho b\n", true);
        write(tree.path(), "a.txt", b"hello\n", false);
        let m = manifest_of_dir(tree.path()).unwrap();
        let expected = format!(
            "100644 {} a.txt\n100755 {} sub/b.sh\n",
            Digest::of(b"hello\n"),
            Digest::of(b"#!/bin/sh\necho b\n")
        );
        assert_eq!(String::from_utf8(m.canonical_bytes()).unwrap(), expected);
        assert_eq!(m.digest(), Digest::of(expected.as_bytes()));
        assert_eq!(SnapshotManifest::parse(expected.as_bytes()).unwrap(), m);
    }

    #[test]
    fn empty_tree_has_empty_input_digest() {
        let tree = tempfile::tempdir().unwrap();
        fs::create_dir(tree.path().join("empty-subdir")).unwrap();
        let m = manifest_of_dir(tree.path()).unwrap();
        assert!(m.entries.is_empty());
        assert_eq!(
            m.digest().to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn sorting_is_bytewise() {
        let d = Digest::of(b"");
        let m = SnapshotManifest::new(vec![
            SnapshotEntry { path: "b".into(), mode: FileMode::Regular, digest: d },
            SnapshotEntry { path: "B".into(), mode: FileMode::Regular, digest: d },
            SnapshotEntry { path: "a/z".into(), mode: FileMode::Regular, digest: d },
            SnapshotEntry { path: "a.z".into(), mode: FileMode::Regular, digest: d },
        ])
        .unwrap();
        let order: Vec<_> = m.entries.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(order, ["B", "a.z", "a/z", "b"]);
    }

    #[test]
    fn rejects_escaping_paths() {
        for bad in ["../x", "/etc/passwd", "a/../b", "a//b", "./a", ""] {
            assert!(validate_relative_path(bad).is_err(), "{bad}");
        }
        assert!(validate_relative_path("a/b..c/d").is_ok());
    }

    #[test]
    fn rejects_noncanonical_manifest_text() {
        let d = Digest::of(b"");
        let text = format!("100644 {d} b\n100644 {d} a\n");
        assert!(SnapshotManifest::parse(text.as_bytes()).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn symlinks_rejected() {
        let tree = tempfile::tempdir().unwrap();
        write(tree.path(), "a", b"x", false);
        std::os::unix::fs::symlink("a", tree.path().join("link")).unwrap();
        assert!(matches!(
            manifest_of_dir(tree.path()),
            Err(StoreError::PathRejected(_))
        ));
    }

    #[test]
    fn tar_round_trip_preserves_modes() {
        let data = tempfile::tempdir().unwrap();
        let blobs = BlobStore::open(data.path().join("blobs")).unwrap();
        let tree = tempfile::tempdir().unwrap();
        write(tree.path(), "run.sh", b"#!/bin/sh\n", true);
        write(tree.path(), "deep/nested/data.csv", b"1,2\n", false);
        let m = import_dir(&blobs, tree.path()).unwrap();

        let mut tar_bytes = Vec::new();
        write_tar(&blobs, &m, &mut tar_bytes).unwrap();
        let mut again = Vec::new();
        write_tar(&blobs, &m, &mut again).unwrap();
        assert_eq!(tar_bytes, again, "tar output is deterministic");

        let out = tempfile::tempdir().unwrap();
        extract_tar(tar_bytes.as_slice(), out.path()).unwrap();
        assert_eq!(manifest_of_dir(out.path()).unwrap(), m);
        assert_eq!(import_tar(&blobs, tar_bytes.as_slice()).unwrap(), m);
    }

    #[test]
    fn tar_dir_matches_store_tar() {
        let data = tempfile::tempdir().unwrap();
        let blobs = BlobStore::open(data.path().join("blobs")).unwrap();
        let tree = tempfile::tempdir().unwrap();
        write(tree.path(), "run.sh", b"#!/bin/sh\n", true);
        write(tree.path(), "a/b.txt", b"b", false);
        let m = import_dir(&blobs, tree.path()).unwrap();
        let mut from_store = Vec::new();
        write_tar(&blobs, &m, &mut from_store).unwrap();
        let mut direct = Vec::new();
        assert_eq!(tar_dir(tree.path(), &mut direct).unwrap(), m.digest());
        assert_eq!(direct, from_store);
    }

    #[test]
    fn vcs_and_data_dirs_ignored_at_top_level() {
        let tree = tempfile::tempdir().unwrap();
        write(tree.path(), "keep.txt", b"k", false);
        write(tree.path(), ".git/HEAD", b"ref", false);
        write(tree.path(), ".labci/ledger.jsonl", b"", false);
        write(tree.path(), "sub/.git/kept", b"x", false);
        let paths: Vec<_> = manifest_of_dir(tree.path()).unwrap().entries.into_iter().map(|e| e.path).collect();
        assert_eq!(paths, ["keep.txt", "sub/.git/kept"]);
    }
}
