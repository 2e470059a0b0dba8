use serde::{Deserialize, Serialize};

use super::{validate_relative_path, Digest, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub size: u64,
    pub digest: Digest,
}

/// Files preserved from one job, sorted by path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub job_id: u64,
    pub entries: Vec<ArtifactEntry>,
}

impl ArtifactManifest {
    pub fn new(job_id: u64, mut entries: Vec<ArtifactEntry>) -> Result<Self, StoreError> {
        for e in &entries {
            validate_relative_path(&e.path)?;
        }
        entries.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
        entries.dedup_by(|a, b| a.path == b.path && a.digest == b.digest);
        if entries.windows(2).any(|w| w[0].path == w[1].path) {
            return Err(StoreError::PathRejected(
                "artifact path recorded with two different contents".into(),
            ));
        }
        Ok(Self { job_id, entries })
    }

    /// Inserts or replaces an entry, keeping the sort order.
    pub fn upsert(&mut self, entry: ArtifactEntry) {
        match self
            .entries
            .binary_search_by(|e| e.path.as_bytes().cmp(entry.path.as_bytes()))
        {
            Ok(i) => self.entries[i] = entry,
            Err(i) => self.entries.insert(i, entry),
        }
    }

    pub fn get(&self, path: &str) -> Option<&ArtifactEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    /// `<size> <hex digest> <path>\n` per entry. Independent of `job_id`, so
    /// two runs that produced the same files share a manifest digest.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} {} {}\n", e.size, e.digest, e.path));
        }
        out.into_bytes()
    }

    pub fn content_digest(&self) -> Digest {
        Digest::of(&self.canonical_bytes())
    }

    pub fn parse_canonical(job_id: u64, bytes: &[u8]) -> Result<Self, StoreError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| StoreError::Malformed("artifact manifest is not UTF-8".into()))?;
        let mut entries = Vec::new();
        for (i, line) in text.split_terminator('\n').enumerate() {
            let bad = || StoreError::Malformed(format!("artifact manifest line {}", i + 1));
            let mut parts = line.splitn(3, ' ');
            let size = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let digest = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let path = parts.next().ok_or_else(bad)?.to_string();
            entries.push(ArtifactEntry { path, size, digest });
        }
        Self::new(job_id, entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip_ignores_job_id() {
        let e = |p: &str, b: &[u8]| ArtifactEntry {
            path: p.into(),
            size: b.len() as u64,
            digest: Digest::of(b),
        };
        let a = ArtifactManifest::new(1, vec![e("z.csv", b"1"), e("a/fig.png", b"")]).unwrap();
        let b = ArtifactManifest::new(2, vec![e("a/fig.png", b""), e("z.csv", b"1")]).unwrap();
        assert_eq!(a.content_digest(), b.content_digest());
        assert_eq!(a.entries[0].path, "a/fig.png");
        let back = ArtifactManifest::parse_canonical(1, &a.canonical_bytes()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn upsert_keeps_order() {
        let mut m = ArtifactManifest::default();
        for p in ["b", "a", "c", "a"] {
            m.upsert(ArtifactEntry { path: p.into(), size: 0, digest: Digest::of(b"") });
        }
        let paths: Vec<_> = m.entries.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, ["a", "b", "c"]);
    }
}
