use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use labci::config::{effective_stages, expand_matrix, lint, parse_config, Stage};
use labci::pipeline::{JobResult, LocalBackend, RunnerKind};
use labci::runner::{HttpApi, InProcessApi, Runner, RunnerConfig, ServerApi};
use labci::server::{
    BuildRef, BuildStatus, BuildView, Capabilities, Coordinator, JobView, PushEvent, RegisterRequest,
    ServerConfig, ServerError, TriggerRequest, DEFAULT_ADDR,
};
use labci::store::snapshot::tar_dir;
use labci::store::{Digest, Verdict};
use labci_cli::agent::{self, current_os, parse_kind, runner_failure, RunnerArgs};
use labci_cli::{exit_with, Failure};

/// Continuous integration for computational experiments.
#[derive(Parser)]
#[command(name = "labci", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ServerArg {
    /// Server address or base URL.
    #[arg(long, env = "LABCI_ADDR", default_value = DEFAULT_ADDR)]
    server: String,
}

impl ServerArg {
    fn api(&self) -> HttpApi {
        HttpApi::new(&self.server, None)
    }
}

#[derive(Args)]
struct DataDirArg {
    #[arg(long, env = "LABCI_DATA_DIR", default_value = ".labci")]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a pipeline file and print errors and warnings.
    Validate {
        /// The config file, or a directory containing `.labci.yml`.
        #[arg(default_value = ".labci.yml")]
        path: PathBuf,
        /// Exit 1 when there are warnings.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run a directory's pipeline in this process, without a server.
    Run {
        #[arg(default_value = ".")]
        dir: PathBuf,
        /// Comma-separated stages to keep, e.g. `run,report`.
        #[arg(long)]
        only: Option<String>,
        /// Repository name recorded in the ledger; defaults to the directory name.
        #[arg(long)]
        repo: Option<String>,
        #[command(flatten)]
        data: DataDirArg,
        /// Do not print job logs.
        #[arg(long, short)]
        quiet: bool,
        #[arg(long)]
        json: bool,
    },
    /// Start the server.
    Serve {
        #[arg(long, env = "LABCI_ADDR", default_value = DEFAULT_ADDR)]
        addr: String,
        #[command(flatten)]
        data: DataDirArg,
        /// Overrides LABCI_PARALLEL_CAP.
        #[arg(long)]
        parallel_cap: Option<usize>,
    },
    /// Start a runner agent.
    Runner(RunnerArgs),
    /// Register a runner and print its token.
    Register {
        #[command(flatten)]
        server: ServerArg,
        #[arg(long, default_value = "selfhosted", value_parser = parse_kind)]
        kind: RunnerKind,
        #[arg(long = "tag")]
        tags: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Upload a directory snapshot and send a push event.
    Push {
        #[arg(default_value = ".")]
        dir: PathBuf,
        #[arg(long)]
        repo: String,
        /// Idempotency key; repeated events create no new build.
        #[arg(long)]
        event_id: Option<String>,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// Start a build for a commit already known to the server.
    Trigger {
        repo: String,
        commit: String,
        #[arg(long)]
        only: Option<String>,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// Show one build, e.g. `demo:3`.
    Status {
        build: String,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// List the builds of a repository.
    Builds {
        repo: String,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// Cancel every unfinished job of a build.
    Cancel {
        build: String,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// Show a job's stages and environment fingerprint.
    Job {
        job: u64,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// Print a job log, following it until the job ends.
    Logs {
        job: u64,
        /// Print what is there now and exit.
        #[arg(long)]
        no_follow: bool,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// List a job's artifacts or fetch one.
    Artifacts {
        job: u64,
        /// Artifact path to download.
        #[arg(long)]
        fetch: Option<String>,
        /// Where to write the fetched artifact; stdout by default.
        #[arg(long, short, requires = "fetch")]
        output: Option<PathBuf>,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// Compare the artifacts of two builds; exit 0 iff they reproduce.
    Compare {
        build_a: String,
        build_b: String,
        /// Allow builds of different commits.
        #[arg(long)]
        cross_commit: bool,
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    labci_cli::reset_sigpipe();
    labci_cli::init_tracing();
    exit_with(dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Validate { path, strict, json } => validate(&path, strict, json),
        Command::Run { dir, only, repo, data, quiet, json } => run(&dir, only.as_deref(), repo, &data.data_dir, quiet, json),
        Command::Serve { addr, data, parallel_cap } => serve(&addr, &data.data_dir, parallel_cap),
        Command::Runner(args) => agent::run(&args, &labci_cli::stop_flag_on_signal()),
        Command::Register { server, kind, tags, json } => {
            let reg = server.api().register(&RegisterRequest { kind, capabilities: Capabilities { os: current_os()?, tags } })?;
            if json {
                print_json(&reg);
            } else {
                println!("runner_id {}", reg.runner_id);
                println!("token {}", reg.token);
            }
            Ok(0)
        }
        Command::Push { dir, repo, event_id, server, json } => push(&dir, &repo, event_id, &server.api(), json),
        Command::Trigger { repo, commit, only, server, json } => {
            let commit_id: Digest = commit.parse().map_err(|e| Failure::Usage(format!("commit: {e}")))?;
            let only_stages = only.as_deref().map(parse_only).transpose()?;
            let build = server.api().trigger(&TriggerRequest { repo_id: repo, commit_id, only_stages })?;
            show_build(&build, json);
            Ok(0)
        }
        Command::Status { build, server, json } => {
            let build = server.api().build(&parse_ref(&build)?)?;
            show_build(&build, json);
            Ok(0)
        }
        Command::Builds { repo, server, json } => {
            let builds = server.api().builds(&repo)?;
            if json {
                print_json(&builds);
            } else {
                for b in &builds {
                    println!("{}  {}  {}  {} job(s)  {}", b.id, b.status, b.commit_id, b.jobs.len(), b.created_at.to_rfc3339());
                }
            }
            Ok(0)
        }
        Command::Cancel { build, server, json } => {
            let build = server.api().cancel(&parse_ref(&build)?)?;
            show_build(&build, json);
            Ok(0)
        }
        Command::Job { job, server, json } => show_job(&server.api(), job, json),
        Command::Logs { job, no_follow, server, json } => logs(&server.api(), job, !no_follow && !json, json),
        Command::Artifacts { job, fetch, output, server, json } => artifacts(&server.api(), job, fetch, output, json),
        Command::Compare { build_a, build_b, cross_commit, server, json } => {
            let report = server.api().compare(&parse_ref(&build_a)?, &parse_ref(&build_b)?, cross_commit)?;
            if json {
                print_json(&report);
            } else {
                print!("{}", report.render_text());
            }
            Ok(if report.verdict == Verdict::Reproduced { 0 } else { 1 })
        }
    }
}

fn print_json<T: serde::Serialize + ?Sized>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn parse_ref(s: &str) -> Result<BuildRef, Failure> {
    s.parse().map_err(|e| Failure::Usage(format!("build `{s}`: {e}")))
}

fn parse_only(list: &str) -> Result<Vec<String>, Failure> {
    let stages: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    for s in &stages {
        s.parse::<Stage>().map_err(|e| Failure::Usage(format!("--only: {e}")))?;
    }
    if stages.is_empty() {
        return Err(Failure::Usage("--only: no stages given".into()));
    }
    Ok(stages)
}

fn validate(path: &Path, strict: bool, json: bool) -> Result<u8, Failure> {
    let file = if path.is_dir() { path.join(".labci.yml") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
    let (cfg, warnings) = match parse_config(&text) {
        Ok(parsed) => parsed,
        Err(e) => {
            if json {
                print_json(&json!({ "valid": false, "error": e.to_string(), "line": e.line() }));
                return Ok(2);
            }
            return Err(Failure::Usage(format!("{}: {e}", file.display())));
        }
    };
    let lints = lint(&cfg);
    let stages = effective_stages(&cfg);
    let jobs = expand_matrix(&cfg).len();
    if json {
        print_json(&json!({
            "valid": true,
            "warnings": warnings,
            "lints": lints,
            "stages": stages,
            "jobs": jobs,
        }));
    } else {
        for w in &warnings {
            println!("warning: {w}");
        }
        for l in &lints {
            println!("{l}");
        }
        let names: Vec<&str> = stages.iter().map(|s| s.as_str()).collect();
        println!("ok: {jobs} job(s), stages: {}", names.join(", "));
    }
    Ok(if strict && !(warnings.is_empty() && lints.is_empty()) { 1 } else { 0 })
}

/// Repository name from a directory, restricted to `[A-Za-z0-9._-]`.
fn repo_name(dir: &Path) -> String {
    let name = fs::canonicalize(dir)
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let clean: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '-' }).collect();
    if clean.is_empty() { "local".into() } else { clean }
}

fn local_failure(e: ServerError) -> Failure {
    Failure::Usage(e.to_string())
}

fn run(dir: &Path, only: Option<&str>, repo: Option<String>, data_dir: &Path, quiet: bool, json: bool) -> Result<u8, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("{}: not a directory", dir.display())));
    }
    let only_stages = only.map(parse_only).transpose()?;
    let config = ServerConfig::from_env().map_err(Failure::Usage)?;
    fs::create_dir_all(data_dir).map_err(|e| Failure::Usage(format!("{}: {e}", data_dir.display())))?;
    let coord = Arc::new(Coordinator::open_dir(data_dir, config).map_err(local_failure)?);
    let (_, commit_id) = coord.store().snapshot_import_dir(dir).map_err(|e| local_failure(e.into()))?;
    let repo_id = repo.unwrap_or_else(|| repo_name(dir));
    let build = coord.trigger_build(&TriggerRequest { repo_id, commit_id, only_stages }).map_err(local_failure)?;

    if build.status == BuildStatus::ConfigError {
        if json {
            print_json(&json!({ "build": build, "jobs": [] }));
        }
        return Err(Failure::Usage(format!("invalid pipeline: {}", build.diagnostics.join("; "))));
    }
    if !json {
        for d in &build.diagnostics {
            eprintln!("{d}");
        }
        println!("build {} commit {}", build.id, build.commit_id);
    }

    let caps = Capabilities { os: current_os()?, tags: Vec::new() };
    let kind = RunnerKind::Selfhosted;
    let api: Arc<dyn ServerApi> =
        Arc::new(InProcessApi::register(coord.clone(), kind, caps.clone()).map_err(local_failure)?);
    let runner_root = data_dir.join("workspaces");
    let mut rc = RunnerConfig::new(kind, &runner_root);
    rc.capabilities = caps;
    let runner = Runner::new(rc, api, Arc::new(LocalBackend::new(kind))).map_err(runner_failure)?;

    let mut views = Vec::new();
    while !coord.get_build(&build.id).map_err(local_failure)?.status.is_terminal() {
        let Some(report) = runner.run_once().map_err(runner_failure)? else { break };
        let job = coord.get_job(report.job_id).map_err(local_failure)?;
        if !json {
            if !quiet {
                io::stdout().write_all(&report.transcript).ok();
            }
            print_job_summary(&job);
            if let Some(ws) = &report.retained_workspace {
                println!("  workspace kept at {}", ws.display());
            }
        }
        views.push(job);
    }
    let mut done = coord.get_build(&build.id).map_err(local_failure)?;
    if !done.status.is_terminal() {
        // Jobs for another OS cannot run here.
        if !json {
            eprintln!("no runner here matches the remaining jobs; canceling them");
        }
        done = coord.cancel_build(&build.id).map_err(local_failure)?;
    }
    if json {
        print_json(&json!({ "build": done, "jobs": views }));
    } else {
        println!("build {} {}", done.id, done.status);
        println!("data in {}", data_dir.display());
    }
    Ok(if done.status == BuildStatus::Succeeded { 0 } else { 1 })
}

fn print_job_summary(job: &JobView) {
    println!("job {} (matrix {}): {}", job.job_id, job.matrix_index, job.state);
    if let Some(result) = &job.result {
        print_stages(result);
    }
}

fn print_stages(result: &JobResult) {
    for r in &result.stage_results {
        let mut line = format!("  {:<8} {}", r.stage.as_str(), r.status);
        if let Some(code) = r.exit_code {
            line.push_str(&format!(" (exit {code})"));
        }
        if let Some(note) = &r.note {
            line.push_str(&format!(" [{note}]"));
        }
        println!("{line}");
    }
}

fn show_build(build: &BuildView, json: bool) {
    if json {
        print_json(build);
        return;
    }
    println!("build {} {} commit {}", build.id, build.status, build.commit_id);
    for d in &build.diagnostics {
        println!("  {d}");
    }
    for j in &build.jobs {
        let runner = j.assigned_runner.as_deref().unwrap_or("-");
        println!("  job {} (matrix {}) {} runner {} log {} bytes", j.job_id, j.matrix_index, j.state, runner, j.log_length);
    }
}

fn push(dir: &Path, repo: &str, event_id: Option<String>, api: &HttpApi, json: bool) -> Result<u8, Failure> {
    let mut tar = Vec::new();
    let commit = tar_dir(dir, &mut tar).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
    let uploaded = api.upload_snapshot(&tar)?;
    if uploaded != commit {
        return Err(Failure::Network(format!("server computed commit {uploaded}, expected {commit}")));
    }
    let event_id = event_id.unwrap_or_else(|| {
        let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        format!("push-{}-{nanos}", &commit.to_hex()[..12])
    });
    let build = api.push(&PushEvent { repo_id: repo.into(), commit_id: commit, snapshot_ref: commit.to_hex(), event_id })?;
    show_build(&build, json);
    Ok(0)
}

fn show_job(api: &HttpApi, job_id: u64, json: bool) -> Result<u8, Failure> {
    let job = api.job(job_id)?;
    let fingerprint = match api.fingerprint(job_id) {
        Ok(f) => Some(f),
        Err(labci::runner::ApiError::Rejected { status: 404, .. }) => None,
        Err(e) => return Err(e.into()),
    };
    if json {
        print_json(&json!({ "job": job, "fingerprint": fingerprint }));
        return Ok(0);
    }
    println!("job {} of build {} (matrix {}): {}", job.job_id, job.build, job.matrix_index, job.state);
    if let Some(result) = &job.result {
        print_stages(result);
    }
    if let Some(fp) = fingerprint {
        for (k, v) in fp.fields() {
            println!("  {k}={v}");
        }
    }
    Ok(0)
}

fn logs(api: &HttpApi, job_id: u64, follow: bool, json: bool) -> Result<u8, Failure> {
    if json {
        let job = api.job(job_id)?;
        let log = api.log(job_id)?;
        print_json(&json!({ "job_id": job_id, "state": job.state, "log": String::from_utf8_lossy(&log) }));
        return Ok(0);
    }
    let mut printed = 0usize;
    let mut out = io::stdout();
    loop {
        // State first: a log fetched after a terminal state is complete.
        let terminal = api.job(job_id)?.state.is_terminal();
        let log = api.log(job_id)?;
        if log.len() > printed {
            out.write_all(&log[printed..]).and_then(|_| out.flush()).map_err(|e| Failure::Usage(e.to_string()))?;
            printed = log.len();
        }
        if terminal || !follow {
            return Ok(0);
        }
        std::thread::sleep(Duration::from_millis(500));
    }
}

fn artifacts(api: &HttpApi, job_id: u64, fetch: Option<String>, output: Option<PathBuf>, json: bool) -> Result<u8, Failure> {
    if let Some(path) = fetch {
        let data = api.artifact(job_id, &path)?;
        match output {
            Some(file) => fs::write(&file, &data).map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?,
            None => io::stdout().write_all(&data).map_err(|e| Failure::Usage(e.to_string()))?,
        }
        return Ok(0);
    }
    let job = api.job(job_id)?;
    if json {
        print_json(&job.artifacts.entries);
    } else {
        for e in &job.artifacts.entries {
            println!("{}  {:>10}  {}", e.digest, e.size, e.path);
        }
    }
    Ok(0)
}

fn serve(addr: &str, data_dir: &Path, parallel_cap: Option<usize>) -> Result<u8, Failure> {
    let mut config = ServerConfig::from_env().map_err(Failure::Usage)?;
    if let Some(cap) = parallel_cap {
        if cap == 0 {
            return Err(Failure::Usage("--parallel-cap must be at least 1".into()));
        }
        config.parallel_cap = cap;
    }
    fs::create_dir_all(data_dir).map_err(|e| Failure::Usage(format!("{}: {e}", data_dir.display())))?;
    let coord = Arc::new(Coordinator::open_dir(data_dir, config).map_err(local_failure)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Usage(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::Network(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Failure::Network(e.to_string()))?;
        println!("labci listening on http://{local} (data in {})", data_dir.display());
        io::stdout().flush().ok();
        labci::server::http::serve(listener, coord, async {
            labci_cli::shutdown_signal().await;
            eprintln!("shutting down");
        })
        .await
        .map_err(|e| Failure::Network(e.to_string()))?;
        Ok(0)
    })
}
