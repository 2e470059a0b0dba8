//! Process-level helpers: spawn `labci serve` and `labci-runner`, run the
//! CLI, and wait on builds through the HTTP client.

#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use labci::config::Os;
use labci::pipeline::RunnerKind;
use labci::runner::HttpApi;
use labci::server::{BuildRef, BuildView, Capabilities, RegisterRequest};

pub const LABCI: &str = env!("CARGO_BIN_EXE_labci");
pub const LABCI_RUNNER: &str = env!("CARGO_BIN_EXE_labci-runner");

/// Environment variables that would leak the caller's setup into tests.
const SCRUB: &[&str] = &["LABCI_ADDR", "LABCI_DATA_DIR", "LABCI_PARALLEL_CAP", "LABCI_MINUTE_MS", "LABCI_HEARTBEAT_MS", "LABCI_TOKEN"];

pub fn command(bin: &str) -> Command {
    let mut c = Command::new(bin);
    for v in SCRUB {
        c.env_remove(v);
    }
    c
}

pub fn labci(args: &[&str]) -> Output {
    labci_env(args, &[])
}

pub fn labci_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = command(LABCI);
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("labci runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn write_tree(dir: &Path, files: &[(&str, &str)]) {
    for (p, body) in files {
        let path = dir.join(p);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, body).unwrap();
    }
}

/// Copies a directory tree (regular files only), keeping modes.
pub fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn pipeline_dir(name: &str) -> PathBuf {
    workspace_root().join("pipelines").join(name)
}

/// A `labci serve` child process; killed on drop.
pub struct Server {
    pub child: Child,
    pub url: String,
    pub data_dir: PathBuf,
}

impl Server {
    pub fn start(data_dir: &Path, env: &[(&str, &str)]) -> Server {
        let mut c = command(LABCI);
        c.args(["serve", "--addr", "127.0.0.1:0", "--data-dir"]).arg(data_dir);
        for (k, v) in env {
            c.env(k, v);
        }
        let mut child = c.stdout(Stdio::piped()).stderr(Stdio::null()).spawn().expect("labci serve starts");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let url = line
            .split_whitespace()
            .find(|w| w.starts_with("http://"))
            .unwrap_or_else(|| panic!("no address in {line:?}"))
            .to_string();
        Server { child, url, data_dir: data_dir.to_path_buf() }
    }

    pub fn client(&self) -> HttpApi {
        HttpApi::new(&self.url, None)
    }

    pub fn register(&self) -> String {
        self.client()
            .register(&RegisterRequest { kind: RunnerKind::Selfhosted, capabilities: Capabilities { os: Os::Linux, tags: vec![] } })
            .unwrap()
            .token
    }

    /// Starts a runner process with a fresh token.
    pub fn runner(&self, workspace: &Path, backend: &str) -> Agent {
        let token = self.register();
        let child = command(LABCI_RUNNER)
            .args(["--server", &self.url, "--token", &token, "--backend", backend, "--poll-ms", "50", "--workspace"])
            .arg(workspace)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .expect("labci-runner starts");
        Agent { child }
    }

    /// `labci <args> --server <url>`.
    pub fn labci(&self, args: &[&str]) -> Output {
        let mut all: Vec<&str> = args.to_vec();
        all.extend(["--server", &self.url]);
        labci(&all)
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.kill();
    }
}

pub struct Agent {
    pub child: Child,
}

impl Drop for Agent {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn wait_terminal(client: &HttpApi, build: &BuildRef, limit: Duration) -> BuildView {
    let start = Instant::now();
    loop {
        let view = client.build(build).unwrap();
        if view.status.is_terminal() {
            return view;
        }
        assert!(start.elapsed() < limit, "build {build} still {} after {limit:?}", view.status);
        std::thread::sleep(Duration::from_millis(50));
    }
}

/// Runs `labci push` and returns the build it created.
pub fn push(server: &Server, dir: &Path, repo: &str) -> BuildView {
    let out = server.labci(&["push", dir.to_str().unwrap(), "--repo", repo, "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Timestamps of every log line, in order.
pub fn log_times(log: &[u8]) -> Vec<chrono::DateTime<chrono::Utc>> {
    String::from_utf8_lossy(log)
        .lines()
        .filter_map(|l| l.split_once(' '))
        .filter_map(|(ts, _)| chrono::DateTime::parse_from_rfc3339(ts).ok())
        .map(|t| t.with_timezone(&chrono::Utc))
        .collect()
}

/// Path of a blob in a data dir.
pub fn blob_path(data_dir: &Path, hex: &str) -> PathBuf {
    data_dir.join("blobs").join(&hex[..2]).join(&hex[2..])
}
