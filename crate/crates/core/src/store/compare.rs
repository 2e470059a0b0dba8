use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ArtifactManifest, Digest, StoreError};
use crate::parallel;
use crate::pipeline::{EnvironmentFingerprint, Outcome};

/// What compare needs to know about one finished job.
#[derive(Debug, Clone)]
pub struct JobRecord {
    pub job_id: u64,
    pub matrix_index: u32,
    pub overall: Outcome,
    pub artifacts: ArtifactManifest,
    pub fingerprint: Option<EnvironmentFingerprint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathVerdict {
    Identical { digest: Digest },
    Differs { digest_a: Digest, digest_b: Digest },
    OnlyInA { digest: Digest },
    OnlyInB { digest: Digest },
}

impl PathVerdict {
    /// The verdict seen from the other side.
    pub fn swapped(&self) -> Self {
        match *self {
            PathVerdict::Identical { digest } => PathVerdict::Identical { digest },
            PathVerdict::Differs { digest_a, digest_b } => PathVerdict::Differs {
                digest_a: digest_b,
                digest_b: digest_a,
            },
            PathVerdict::OnlyInA { digest } => PathVerdict::OnlyInB { digest },
            PathVerdict::OnlyInB { digest } => PathVerdict::OnlyInA { digest },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathComparison {
    pub path: String,
    pub verdict: PathVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDiff {
    pub field: String,
    pub a: Option<String>,
    pub b: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobComparison {
    pub matrix_index: u32,
    pub job_a: u64,
    pub job_b: u64,
    pub overall_a: Outcome,
    pub overall_b: Outcome,
    pub paths: Vec<PathComparison>,
    /// Informational only; never affects the verdict.
    pub fingerprint_diffs: Vec<FieldDiff>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Reproduced,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReproReport {
    pub build_a: String,
    pub build_b: String,
    pub commit_a: Digest,
    pub commit_b: Digest,
    pub pairs: Vec<JobComparison>,
    pub verdict: Verdict,
}

impl ReproReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("compare {} ({}) vs {} ({})\n", self.build_a, self.commit_a, self.build_b, self.commit_b));
        for pair in &self.pairs {
            out.push_str(&format!(
                "job #{} (matrix {}) vs job #{}: {} / {}\n",
                pair.job_a, pair.matrix_index, pair.job_b, pair.overall_a, pair.overall_b
            ));
            for p in &pair.paths {
                let line = match &p.verdict {
                    PathVerdict::Identical { digest } => format!("  identical  {} {}", p.path, digest),
                    PathVerdict::Differs { digest_a, digest_b } => {
                        format!("  differs    {} {} {}", p.path, digest_a, digest_b)
                    }
                    PathVerdict::OnlyInA { digest } => format!("  only_in_a  {} {}", p.path, digest),
                    PathVerdict::OnlyInB { digest } => format!("  only_in_b  {} {}", p.path, digest),
                };
                out.push_str(&line);
                out.push('\n');
            }
            for d in &pair.fingerprint_diffs {
                out.push_str(&format!(
                    "  env {}: {} -> {}\n",
                    d.field,
                    d.a.as_deref().unwrap_or("-"),
                    d.b.as_deref().unwrap_or("-")
                ));
            }
        }
        out.push_str(match self.verdict {
            Verdict::Reproduced => "verdict: reproduced\n",
            Verdict::Diverged => "verdict: diverged\n",
        });
        out
    }
}

/// Digest on each side, plus the path text.
type Sides<'a> = (Option<Digest>, Option<Digest>, &'a str);

fn diff_paths(a: &ArtifactManifest, b: &ArtifactManifest) -> Vec<PathComparison> {
    let mut merged: BTreeMap<&[u8], Sides> = BTreeMap::new();
    for e in &a.entries {
        merged.entry(e.path.as_bytes()).or_insert((None, None, &e.path)).0 = Some(e.digest);
    }
    for e in &b.entries {
        merged.entry(e.path.as_bytes()).or_insert((None, None, &e.path)).1 = Some(e.digest);
    }
    merged
        .into_values()
        .map(|(da, db, path)| {
            let verdict = match (da, db) {
                (Some(x), Some(y)) if x == y => PathVerdict::Identical { digest: x },
                (Some(x), Some(y)) => PathVerdict::Differs { digest_a: x, digest_b: y },
                (Some(x), None) => PathVerdict::OnlyInA { digest: x },
                (None, Some(y)) => PathVerdict::OnlyInB { digest: y },
                (None, None) => unreachable!("path came from one of the manifests"),
            };
            PathComparison { path: path.to_string(), verdict }
        })
        .collect()
}

fn diff_fingerprints(
    a: Option<&EnvironmentFingerprint>,
    b: Option<&EnvironmentFingerprint>,
) -> Vec<FieldDiff> {
    let fa: BTreeMap<String, String> = a.map(|f| f.comparable_fields()).unwrap_or_default().into_iter().collect();
    let fb: BTreeMap<String, String> = b.map(|f| f.comparable_fields()).unwrap_or_default().into_iter().collect();
    let mut keys: Vec<&String> = fa.keys().chain(fb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| FieldDiff {
            field: k.clone(),
            a: fa.get(k).cloned(),
            b: fb.get(k).cloned(),
        })
        .collect()
}

/// Pairs jobs by matrix index and diffs their artifacts.
///
/// The verdict is `Reproduced` iff every artifact path of every pair is
/// identical; environment differences are reported but do not count.
pub fn compare_jobs(
    a: &[JobRecord],
    b: &[JobRecord],
) -> Result<(Vec<JobComparison>, Verdict), StoreError> {
    let mut a: Vec<&JobRecord> = a.iter().collect();
    let mut b: Vec<&JobRecord> = b.iter().collect();
    a.sort_by_key(|r| r.matrix_index);
    b.sort_by_key(|r| r.matrix_index);
    let same_shape = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| x.matrix_index == y.matrix_index);
    if !same_shape {
        return Err(StoreError::MatrixShapeMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let pairs: Vec<(&JobRecord, &JobRecord)> = a.into_iter().zip(b).collect();
    let comparisons = parallel::map(&pairs, |(x, y)| JobComparison {
        matrix_index: x.matrix_index,
        job_a: x.job_id,
        job_b: y.job_id,
        overall_a: x.overall,
        overall_b: y.overall,
        paths: diff_paths(&x.artifacts, &y.artifacts),
        fingerprint_diffs: diff_fingerprints(x.fingerprint.as_ref(), y.fingerprint.as_ref()),
    });
    let reproduced = comparisons.iter().all(|c| {
        c.paths
            .iter()
            .all(|p| matches!(p.verdict, PathVerdict::Identical { .. }))
    });
    let verdict = if reproduced { Verdict::Reproduced } else { Verdict::Diverged };
    Ok((comparisons, verdict))
}
