//! The runner agent as a command: `labci runner` and `labci-runner`.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, ValueEnum};
use serde::Deserialize;

use labci::config::Os;
use labci::pipeline::{BatchBridgeBackend, ExecutorBackend, LocalBackend, RunnerKind, SimulatedConfig};
use labci::runner::{HttpApi, Runner, RunnerConfig, RunnerError};
use labci::server::{Capabilities, DEFAULT_ADDR};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Local,
    BatchSim,
}

#[derive(Debug, Args)]
pub struct RunnerArgs {
    /// Server base URL.
    #[arg(long, env = "LABCI_ADDR", default_value = DEFAULT_ADDR)]
    pub server: String,
    /// Token from `labci register`.
    #[arg(long, env = "LABCI_TOKEN")]
    pub token: String,
    #[arg(long, value_enum, default_value = "local")]
    pub backend: Backend,
    /// Directory for job workspaces.
    #[arg(long)]
    pub workspace: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub poll_ms: u64,
    #[arg(long, default_value = "selfhosted", value_parser = parse_kind)]
    pub kind: RunnerKind,
    /// JSON file with `tick_ms`, `capacity` and `drop_after` for the
    /// simulated batch scheduler.
    #[arg(long)]
    pub scheduler_config: Option<PathBuf>,
    /// Capability tag; repeatable.
    #[arg(long = "tag")]
    pub tags: Vec<String>,
}

pub fn parse_kind(s: &str) -> Result<RunnerKind, String> {
    s.parse()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchedulerFile {
    tick_ms: Option<u64>,
    capacity: Option<usize>,
    drop_after: Option<u64>,
    delay_ticks: Option<u32>,
}

fn scheduler_config(path: Option<&PathBuf>) -> Result<SimulatedConfig, Failure> {
    let mut cfg = SimulatedConfig::default();
    let Some(path) = path else { return Ok(cfg) };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let file: SchedulerFile =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(t) = file.tick_ms {
        cfg.tick_ms = t;
    }
    if let Some(c) = file.capacity {
        cfg.capacity = c;
    }
    if file.drop_after.is_some() {
        cfg.drop_after = file.drop_after;
    }
    if let Some(d) = file.delay_ticks {
        cfg.delay_ticks = d;
    }
    Ok(cfg)
}

pub fn current_os() -> Result<Os, Failure> {
    Os::current().ok_or_else(|| Failure::Usage("unsupported host operating system".into()))
}

pub fn make_backend(
    backend: Backend,
    kind: RunnerKind,
    tags: &[String],
    scheduler: Option<&PathBuf>,
) -> Result<Arc<dyn ExecutorBackend>, Failure> {
    let local = LocalBackend::new(kind).with_tags(tags.to_vec());
    Ok(match backend {
        Backend::Local => Arc::new(local),
        Backend::BatchSim => Arc::new(BatchBridgeBackend::simulated(scheduler_config(scheduler)?, local).0),
    })
}

/// Serves jobs until `stop` is set. An invalid token exits with code 3.
pub fn run(args: &RunnerArgs, stop: &AtomicBool) -> Result<u8, Failure> {
    let backend = make_backend(args.backend, args.kind, &args.tags, args.scheduler_config.as_ref())?;
    let mut config = RunnerConfig::new(args.kind, &args.workspace);
    config.capabilities = Capabilities { os: current_os()?, tags: args.tags.clone() };
    config.poll_interval = Duration::from_millis(args.poll_ms.max(1));
    let api = Arc::new(HttpApi::new(&args.server, Some(args.token.clone())));
    let runner = Runner::new(config, api, backend).map_err(runner_failure)?;
    eprintln!("runner attached to {} ({} backend)", args.server, args.backend.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default());
    runner.attach(stop).map_err(runner_failure)?;
    Ok(0)
}

pub fn runner_failure(e: RunnerError) -> Failure {
    match e {
        RunnerError::Auth(_) | RunnerError::Server(_) => Failure::Network(e.to_string()),
        RunnerError::Config(_) | RunnerError::Workspace(_) => Failure::Usage(e.to_string()),
    }
}
