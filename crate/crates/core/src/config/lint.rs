use std::fmt;

use serde::{Deserialize, Serialize};

use super::{expand_matrix, PipelineConfig};

/// A non-fatal reproducibility warning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "warning[{}]: {}", self.code, self.message)
    }
}

fn diag(code: &str, message: &str) -> Diagnostic {
    Diagnostic { code: code.to_string(), message: message.to_string() }
}

pub fn lint(cfg: &PipelineConfig) -> Vec<Diagnostic> {
    let jobs = expand_matrix(cfg);
    let mut out = Vec::new();
    if jobs.iter().any(|j| j.env.language.is_some() && j.env.language_version.is_none()) {
        out.push(diag("unpinned-toolchain", "unpinned toolchain version"));
    }
    let first_os = jobs[0].env.os;
    if jobs.iter().all(|j| j.env.os == first_os) {
        out.push(diag("single-os", "single-OS matrix"));
    }
    let has_run = !cfg.stages.run.is_empty();
    if has_run && cfg.artifacts.patterns.is_empty() {
        out.push(diag("no-artifacts", "no artifacts declared while a run stage exists"));
    }
    if !has_run {
        out.push(diag("no-run-stage", "no run stage"));
    }
    out
}
