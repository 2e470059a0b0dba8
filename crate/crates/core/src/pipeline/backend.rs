use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::process::{run_command, CancelToken, CommandEnd, CommandSpec};
use super::RunnerKind;
use crate::config::Stage;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("workspace missing: {0}")]
    WorkspaceMissing(String),
}

/// Machine facts reported by a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostFacts {
    pub os_name: String,
    pub os_version: String,
    pub cpu_count: u32,
    pub mem_total_mb: u64,
    pub hostname: String,
}

impl HostFacts {
    /// Facts of the machine this process runs on.
    pub fn detect() -> Result<Self, ExecError> {
        use sysinfo::{MemoryRefreshKind, RefreshKind, System};
        let sys = System::new_with_specifics(
            RefreshKind::new().with_memory(MemoryRefreshKind::new().with_ram()),
        );
        let cpu_count = std::thread::available_parallelism()
            .map(|n| n.get() as u32)
            .unwrap_or(1);
        let mem_total_mb = sys.total_memory() / (1024 * 1024);
        if mem_total_mb == 0 {
            return Err(ExecError::BackendUnavailable("could not read total memory".into()));
        }
        Ok(Self {
            os_name: std::env::consts::OS.to_string(),
            os_version: System::long_os_version()
                .or_else(System::os_version)
                .unwrap_or_else(|| "unknown".into()),
            cpu_count: cpu_count.max(1),
            mem_total_mb,
            hostname: System::host_name().unwrap_or_else(|| "unknown".into()),
        })
    }
}

/// What a backend is and what it can run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentity {
    /// `local` or `batch_bridge`.
    pub name: String,
    pub kind: RunnerKind,
    pub os: String,
    pub tags: Vec<String>,
}

pub struct StageRequest<'a> {
    pub workspace: &'a Path,
    pub stage: Stage,
    pub commands: &'a [String],
    /// Job env vars plus injected CI variables.
    pub env: &'a BTreeMap<String, String>,
}

pub struct StageControl {
    pub deadline: Instant,
    pub cancel: CancelToken,
    pub grace: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageOutcome {
    /// Exit code of the last command that ran (first nonzero, or 0).
    Exited(i32),
    TimedOut,
    Canceled,
    /// The backend lost track of the work; the string is the reason.
    Lost(String),
}

pub trait ExecutorBackend: Send + Sync {
    fn identity(&self) -> BackendIdentity;

    fn host_facts(&self) -> Result<HostFacts, ExecError>;

    /// Detected version of a toolchain, if a probe exists and succeeds.
    fn probe_toolchain(&self, language: &str) -> Option<String>;

    /// Runs a stage's commands in order, stopping at the first nonzero exit.
    /// Raw output lines go to `out` in order.
    fn execute(
        &self,
        req: &StageRequest<'_>,
        out: &mut dyn FnMut(&[u8]),
        ctl: &StageControl,
    ) -> Result<StageOutcome, ExecError>;
}

/// Runs stage commands sequentially, stopping at the first nonzero exit.
pub fn run_commands(
    req: &StageRequest<'_>,
    out: &mut dyn FnMut(&[u8]),
    ctl: &StageControl,
) -> Result<StageOutcome, ExecError> {
    if !req.workspace.is_dir() {
        return Err(ExecError::WorkspaceMissing(req.workspace.display().to_string()));
    }
    let mut last = 0;
    for command in req.commands {
        if ctl.cancel.is_canceled() {
            return Ok(StageOutcome::Canceled);
        }
        if Instant::now() >= ctl.deadline {
            return Ok(StageOutcome::TimedOut);
        }
        let spec = CommandSpec { command, cwd: req.workspace, env: req.env };
        let end = run_command(&spec, out, ctl.deadline, &ctl.cancel, ctl.grace)
            .map_err(|e| ExecError::BackendUnavailable(format!("spawning `{command}`: {e}")))?;
        match end {
            CommandEnd::Exited(0) => last = 0,
            CommandEnd::Exited(code) => return Ok(StageOutcome::Exited(code)),
            CommandEnd::TimedOut => return Ok(StageOutcome::TimedOut),
            CommandEnd::Canceled => return Ok(StageOutcome::Canceled),
        }
    }
    Ok(StageOutcome::Exited(last))
}

/// Commands tried, in order, to detect a toolchain version.
fn probe_commands(language: &str) -> &'static [&'static str] {
    match language {
        "python" => &["python3 --version", "python --version"],
        "node" | "nodejs" => &["node --version"],
        "ruby" => &["ruby --version"],
        "go" => &["go version"],
        "rust" => &["rustc --version"],
        "java" | "jdk" => &["java -version"],
        "r" => &["R --version"],
        "julia" => &["julia --version"],
        "perl" => &["perl -e 'print $^V'"],
        "php" => &["php --version"],
        _ => &[],
    }
}

/// First `N.N[.N...]` token in `text`.
pub fn extract_version(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() && (i == 0 || !(bytes[i - 1].is_ascii_digit() || bytes[i - 1] == b'.')) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            let token = text[start..i].trim_end_matches('.');
            if token.contains('.') {
                return Some(token.to_string());
            }
        }
        i += 1;
    }
    None
}

/// True if every dotted component of `requested` matches the same-position
/// component of `found` (`3.6` matches `3.6.9`, not `3.8`).
pub fn version_matches(requested: &str, found: &str) -> bool {
    let found: Vec<&str> = found.split('.').collect();
    let requested: Vec<&str> = requested.split('.').collect();
    requested.len() <= found.len() && requested.iter().zip(&found).all(|(a, b)| a == b)
}

/// Executes stages as host processes in the workspace.
#[derive(Debug, Clone)]
pub struct LocalBackend {
    kind: RunnerKind,
    tags: Vec<String>,
    facts: Option<HostFacts>,
    toolchains: Option<BTreeMap<String, String>>,
}

impl LocalBackend {
    pub fn new(kind: RunnerKind) -> Self {
        Self { kind, tags: Vec::new(), facts: None, toolchains: None }
    }

    pub fn with_tags(mut self, tags: Vec<String>) -> Self {
        self.tags = tags;
        self
    }

    /// Reports fixed machine facts instead of detecting them.
    pub fn with_host_facts(mut self, facts: HostFacts) -> Self {
        self.facts = Some(facts);
        self
    }

    /// Answers toolchain probes from a table instead of running commands.
    pub fn with_toolchains(mut self, table: BTreeMap<String, String>) -> Self {
        self.toolchains = Some(table);
        self
    }
}

impl ExecutorBackend for LocalBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "local".into(),
            kind: self.kind,
            os: std::env::consts::OS.into(),
            tags: self.tags.clone(),
        }
    }

    fn host_facts(&self) -> Result<HostFacts, ExecError> {
        match &self.facts {
            Some(f) => Ok(f.clone()),
            None => HostFacts::detect(),
        }
    }

    fn probe_toolchain(&self, language: &str) -> Option<String> {
        if let Some(table) = &self.toolchains {
            return table.get(language).cloned();
        }
        let cwd = std::env::temp_dir();
        let env = BTreeMap::new();
        for command in probe_commands(language) {
            let mut text = String::new();
            let end = run_command(
                &CommandSpec { command, cwd: &cwd, env: &env },
                &mut |l| {
                    text.push_str(&String::from_utf8_lossy(l));
                    text.push('\n');
                },
                Instant::now() + Duration::from_secs(10),
                &CancelToken::new(),
                Duration::from_secs(1),
            );
            if matches!(end, Ok(CommandEnd::Exited(0))) {
                if let Some(v) = extract_version(&text) {
                    return Some(v);
                }
            }
        }
        None
    }

    fn execute(
        &self,
        req: &StageRequest<'_>,
        out: &mut dyn FnMut(&[u8]),
        ctl: &StageControl,
    ) -> Result<StageOutcome, ExecError> {
        run_commands(req, out, ctl)
    }
}
