//! The HTTP API end to end: a real listener, the blocking client, and a
//! runner talking to it over TCP.

use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use labci::config::Os;
use labci::pipeline::{JobState, LocalBackend, RunnerKind};
use labci::runner::{ApiError, HttpApi, Runner, RunnerConfig, ServerApi};
use labci::server::{
    BuildStatus, Capabilities, Coordinator, PushEvent, RegisterRequest, ServerConfig, TriggerRequest,
};
use labci::store::snapshot::tar_dir;
use labci::store::{Digest, Verdict};

struct TestServer {
    addr: SocketAddr,
    coord: Arc<Coordinator>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
    _data: tempfile::TempDir,
}

impl TestServer {
    fn start() -> Self {
        let data = tempfile::tempdir().unwrap();
        let coord = Arc::new(Coordinator::open_dir(data.path(), ServerConfig::default()).unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let c = coord.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                labci::server::http::serve(listener, c, async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Self { addr, coord, stop: Some(tx), thread: Some(thread), _data: data }
    }

    fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    fn client(&self) -> HttpApi {
        HttpApi::new(&self.url(), None)
    }

    fn runner_api(&self) -> HttpApi {
        let reg = self
            .client()
            .register(&RegisterRequest { kind: RunnerKind::Cloud, capabilities: Capabilities { os: Os::Linux, tags: vec![] } })
            .unwrap();
        HttpApi::new(&self.url(), Some(reg.token))
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn write_tree(dir: &Path, files: &[(&str, &str)]) {
    for (p, body) in files {
        let path = dir.join(p);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, body).unwrap();
    }
}

fn upload(api: &HttpApi, files: &[(&str, &str)]) -> Digest {
    let src = tempfile::tempdir().unwrap();
    write_tree(src.path(), files);
    let mut tar = Vec::new();
    let local = tar_dir(src.path(), &mut tar).unwrap();
    let commit = api.upload_snapshot(&tar).unwrap();
    assert_eq!(commit, local, "server and client agree on the commit id");
    commit
}

fn runner(api: HttpApi, ws: &Path) -> Runner {
    let mut cfg = RunnerConfig::new(RunnerKind::Cloud, ws);
    cfg.capabilities = Capabilities { os: Os::Linux, tags: vec![] };
    cfg.poll_interval = Duration::from_millis(20);
    cfg.heartbeat_interval = Duration::from_millis(200);
    cfg.flush_interval = Duration::from_millis(10);
    Runner::new(cfg, Arc::new(api), Arc::new(LocalBackend::new(RunnerKind::Cloud))).unwrap()
}

const MATRIX: &str = "run:\n  - echo \"shard $SHARD\"\n  - echo \"$SHARD\" > out.txt\nartifacts: [out.txt]\nmatrix:\n  - env: {SHARD: 0}\n  - env: {SHARD: 1}\n";

#[test]
fn push_run_and_read_back() {
    let server = TestServer::start();
    let client = server.client();
    let commit = upload(&client, &[(".labci.yml", MATRIX)]);
    let event = PushEvent { repo_id: "demo".into(), commit_id: commit, snapshot_ref: commit.to_hex(), event_id: "e1".into() };
    let build = client.push(&event).unwrap();
    assert_eq!(build.status, BuildStatus::Pending);
    assert_eq!(build.jobs.len(), 2);
    // Same event id: same build.
    assert_eq!(client.push(&event).unwrap().id, build.id);

    let ws = tempfile::tempdir().unwrap();
    let r = runner(server.runner_api(), ws.path());
    let mut transcripts = Vec::new();
    while let Some(report) = r.run_once().unwrap() {
        transcripts.push(report);
    }
    assert_eq!(transcripts.len(), 2);

    let done = client.build(&build.id).unwrap();
    assert_eq!(done.status, BuildStatus::Succeeded);
    for report in &transcripts {
        let log = client.log(report.job_id).unwrap();
        assert_eq!(log, report.transcript);
        let job = client.job(report.job_id).unwrap();
        assert_eq!(job.state, JobState::Succeeded);
        let shard = job.matrix_index.to_string();
        assert!(String::from_utf8_lossy(&log).contains(&format!("[run] shard {shard}\n")));
        assert_eq!(client.artifact(report.job_id, "out.txt").unwrap(), format!("{shard}\n").into_bytes());
        let fp = client.fingerprint(report.job_id).unwrap();
        assert_eq!(fp.runner_kind, RunnerKind::Cloud);
    }
    assert_eq!(client.builds("demo").unwrap().len(), 1);

    // Each terminal job has exactly one ledger entry, bound to the commit.
    let entries = server.coord.store().query_ledger("demo", &commit);
    let mut ids: Vec<u64> = entries.iter().map(|e| e.job_id).collect();
    ids.sort();
    assert_eq!(ids, done.jobs.iter().map(|j| j.job_id).collect::<Vec<_>>());
    assert!(server.coord.store().has_snapshot(&commit));

    // A second build of the same commit reproduces the first.
    let again = client.trigger(&TriggerRequest { repo_id: "demo".into(), commit_id: commit, only_stages: None }).unwrap();
    while r.run_once().unwrap().is_some() {}
    let report = client.compare(&build.id, &again.id, false).unwrap();
    assert_eq!(report.verdict, Verdict::Reproduced);
}

#[test]
fn protocol_errors_have_status_and_code() {
    let server = TestServer::start();
    let client = server.client();
    let commit = upload(&client, &[(".labci.yml", "run: [echo hi]\n")]);

    // No token.
    let anonymous = HttpApi::new(&server.url(), None);
    let caps = Capabilities { os: Os::Linux, tags: vec![] };
    assert!(matches!(anonymous.claim(&caps), Err(ApiError::Auth(_))));
    let bogus = HttpApi::new(&server.url(), Some("nope".into()));
    assert!(matches!(bogus.claim(&caps), Err(ApiError::Auth(_))));

    let api = server.runner_api();
    assert_eq!(api.claim(&caps).unwrap(), None, "204 when nothing is queued");

    client
        .push(&PushEvent { repo_id: "demo".into(), commit_id: commit, snapshot_ref: commit.to_hex(), event_id: "e".into() })
        .unwrap();
    let job = api.claim(&caps).unwrap().unwrap();
    match api.append_log(job.job_id, 5, b"x") {
        Err(ApiError::Rejected { status: 409, code, .. }) => assert_eq!(code, "out_of_order_chunk"),
        other => panic!("{other:?}"),
    }
    match api.upload_artifact(job.job_id, "../escape", b"x") {
        Err(ApiError::Rejected { status: 400, code, .. }) => assert_eq!(code, "path_escapes_workspace"),
        other => panic!("{other:?}"),
    }
    match client.job(9999) {
        Err(ApiError::Rejected { status: 404, .. }) => {}
        other => panic!("{other:?}"),
    }
    let unknown = Digest::of(b"no such snapshot");
    match client.trigger(&TriggerRequest { repo_id: "demo".into(), commit_id: unknown, only_stages: None }) {
        Err(ApiError::Rejected { status: 404, code, .. }) => assert_eq!(code, "unknown_commit"),
        other => panic!("{other:?}"),
    }
    // Only the assigned runner may write.
    let other = server.runner_api();
    assert!(matches!(other.append_log(job.job_id, 0, b"x"), Err(ApiError::Auth(_)) | Err(ApiError::Rejected { .. })));
    assert!(!api.heartbeat(job.job_id).unwrap());
}

#[test]
fn unreachable_server_is_transient() {
    let api = HttpApi::new("127.0.0.1:1", Some("t".into()));
    let err = api.claim(&Capabilities { os: Os::Linux, tags: vec![] }).unwrap_err();
    assert!(err.is_transient(), "{err:?}");
}

#[test]
fn attach_loop_picks_up_pushed_build() {
    let server = TestServer::start();
    let client = server.client();
    let commit = upload(&client, &[(".labci.yml", "run: [echo late]\n")]);
    let api = server.runner_api();
    let ws = tempfile::tempdir().unwrap();
    let r = runner(api, ws.path());
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let build = client
        .push(&PushEvent { repo_id: "demo".into(), commit_id: commit, snapshot_ref: commit.to_hex(), event_id: "x".into() })
        .unwrap();
    std::thread::scope(|s| {
        s.spawn(|| r.attach(&stop).unwrap());
        let start = Instant::now();
        while !client.build(&build.id).unwrap().status.is_terminal() {
            assert!(start.elapsed() < Duration::from_secs(20));
            std::thread::sleep(Duration::from_millis(20));
        }
        stop.store(true, std::sync::atomic::Ordering::SeqCst);
    });
    assert_eq!(client.build(&build.id).unwrap().status, BuildStatus::Succeeded);
}
