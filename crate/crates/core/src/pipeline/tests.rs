use std::fs;

use proptest::prelude::*;

use super::*;
use crate::config::{expand_matrix, ArtifactSpec, PipelineConfig, PlannedStage};
use crate::store::Digest;

fn ctx() -> JobContext {
    JobContext { job_id: 1, build_id: 1, repo_id: "demo".into(), commit_id: "0".repeat(64) }
}

fn mock() -> LocalBackend {
    LocalBackend::new(RunnerKind::Cloud).with_host_facts(HostFacts {
        os_name: "linux".into(),
        os_version: "test".into(),
        cpu_count: 2,
        mem_total_mb: 7680,
        hostname: "mock".into(),
    })
}

fn spec_from(yaml: &str) -> JobSpec {
    expand_matrix(&PipelineConfig::parse(yaml).unwrap()).remove(0)
}

fn run(spec: &JobSpec, ws: &Path, opts: &RunOptions) -> (JobResult, Vec<u8>) {
    let mut log = Vec::new();
    let r = run_job(spec, &ctx(), &mock(), ws, opts, &mut log);
    (r, log)
}

fn stage_ctl(deadline: Duration) -> StageControl {
    StageControl { deadline: Instant::now() + deadline, cancel: CancelToken::new(), grace: Duration::from_secs(5) }
}

fn one_stage(cmd: &str, deadline: Duration) -> (StageResult, Vec<u8>) {
    let ws = tempfile::tempdir().unwrap();
    let mut buf = Vec::new();
    let r = {
        let mut log = JobLog::new(&mut buf);
        execute_stage(&mock(), ws.path(), Stage::Test, &[cmd.to_string()], &BTreeMap::new(), &stage_ctl(deadline), &mut log)
            .unwrap()
    };
    (r, buf)
}

#[test]
fn execute_stage_true() {
    let (r, _) = one_stage("true", Duration::from_secs(30));
    assert_eq!((r.status, r.exit_code), (StageStatus::Succeeded, Some(0)));
}

#[test]
fn execute_stage_exit_code() {
    let (r, _) = one_stage("sh -c 'exit 3'", Duration::from_secs(30));
    assert_eq!((r.status, r.exit_code), (StageStatus::Failed, Some(3)));
}

#[test]
fn execute_stage_timeout() {
    let start = Instant::now();
    let (r, log) = one_stage("sleep 120", Duration::from_secs(1));
    assert_eq!(r.status, StageStatus::TimedOut);
    assert!(start.elapsed() < Duration::from_secs(5), "{:?}", start.elapsed());
    assert!(String::from_utf8_lossy(&log).contains("[test] stage timed out"));
}

#[test]
fn execute_stage_missing_workspace() {
    let mut buf = Vec::new();
    let mut log = JobLog::new(&mut buf);
    let e = execute_stage(&mock(), Path::new("/nonexistent/ws"), Stage::Run, &["true".into()], &BTreeMap::new(), &stage_ctl(Duration::from_secs(5)), &mut log);
    assert!(matches!(e, Err(ExecError::WorkspaceMissing(_))));
}

#[test]
fn log_lines_have_exact_prefix() {
    let (_, log) = one_stage("echo hello; echo world", Duration::from_secs(30));
    let text = String::from_utf8(log).unwrap();
    for (line, expected) in text.lines().zip(["hello", "world"]) {
        let (ts, stage, raw) = parse_line(line.as_bytes()).unwrap();
        assert!(chrono::DateTime::parse_from_rfc3339(ts).is_ok());
        assert!(ts.ends_with('Z'));
        assert_eq!(stage, "test");
        assert_eq!(raw, expected.as_bytes());
    }
}

#[test]
fn injected_ci_variables() {
    let ws = tempfile::tempdir().unwrap();
    let spec = spec_from("env: {MINE: yes}\nrun:\n  - echo \"$CI $LABCI_JOB_ID $LABCI_BUILD_ID $LABCI_STAGE $LABCI_MATRIX_INDEX $MINE\"\n");
    let (r, log) = run(&spec, ws.path(), &RunOptions::default());
    assert_eq!(r.overall, Outcome::Succeeded);
    assert!(String::from_utf8_lossy(&log).contains("[run] true 1 1 run 0 yes\n"));
    assert!(String::from_utf8_lossy(&log).contains(&format!("[run] {}", "")));
}

#[test]
fn listing_two_shape_succeeds() {
    let ws = tempfile::tempdir().unwrap();
    fs::write(ws.path().join("requirements.txt"), b"").unwrap();
    let spec = spec_from("install:\n  - pip install -r requirements.txt\nscript: # run experiment\n  - echo done\n");
    let (r, log) = run(&spec, ws.path(), &RunOptions::default());
    assert_eq!(
        r.statuses(),
        [(Stage::Info, StageStatus::Succeeded), (Stage::Install, StageStatus::Succeeded), (Stage::Run, StageStatus::Succeeded)],
        "{}",
        String::from_utf8_lossy(&log)
    );
    assert_eq!(r.overall, Outcome::Succeeded);
}

#[test]
fn failing_test_skips_rest() {
    let ws = tempfile::tempdir().unwrap();
    let spec = spec_from("install: [true]\nbuild: [true]\ntest: [exit 1]\ndeploy: [true]\nrun: [true]\nreport: [true]\n");
    let (r, _) = run(&spec, ws.path(), &RunOptions::default());
    use StageStatus::*;
    assert_eq!(
        r.statuses(),
        [
            (Stage::Info, Succeeded),
            (Stage::Install, Succeeded),
            (Stage::Build, Succeeded),
            (Stage::Test, Failed),
            (Stage::Deploy, Skipped),
            (Stage::Run, Skipped),
            (Stage::Report, Skipped),
        ]
    );
    assert_eq!(r.overall, Outcome::Failed);
    for s in &r.stage_results[4..] {
        assert_eq!((s.exit_code, s.log_range.length), (None, 0));
    }
}

#[test]
fn artifact_digest_matches_sha256sum() {
    // `printf 'a,b\n1,2\n' | sha256sum`
    const EXPECTED: &str = "492d5ea496056f1a6a6592241032fab764c321596317930b4fa0e1e8bc3b7470";
    let ws = tempfile::tempdir().unwrap();
    let spec = spec_from("run:\n  - printf 'a,b\\n1,2\\n' > result.csv\nartifacts: ['*.csv']\n");
    let (r, _) = run(&spec, ws.path(), &RunOptions::default());
    assert_eq!(r.overall, Outcome::Succeeded);
    assert_eq!(r.artifacts.entries.len(), 1);
    assert_eq!(r.artifacts.entries[0].path, "result.csv");
    assert_eq!(r.artifacts.entries[0].digest.to_hex(), EXPECTED);
    assert_eq!(r.artifacts.entries[0].size, 8);
}

#[test]
fn artifacts_collected_after_failure() {
    let ws = tempfile::tempdir().unwrap();
    let spec = spec_from("run:\n  - echo partial > out.txt\n  - exit 2\nartifacts: ['*.txt']\n");
    let (r, _) = run(&spec, ws.path(), &RunOptions::default());
    assert_eq!(r.overall, Outcome::Failed);
    assert_eq!(r.artifacts.entries[0].digest, Digest::of(b"partial\n"));
}

#[test]
fn job_timeout_scaled_minute() {
    let ws = tempfile::tempdir().unwrap();
    let spec = spec_from("run: [sleep 60]\ntimeout_minutes: 1\n");
    let opts = RunOptions { minute: Duration::from_secs(1), ..Default::default() };
    let start = Instant::now();
    let (r, _) = run(&spec, ws.path(), &opts);
    assert_eq!(r.overall, Outcome::TimedOut);
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn cancel_mid_stage() {
    let ws = tempfile::tempdir().unwrap();
    let spec = spec_from("run: [sleep 60]\nreport: [true]\n");
    let opts = RunOptions::default();
    let cancel = opts.cancel.clone();
    let t = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(500));
        cancel.cancel();
    });
    let (r, _) = run(&spec, ws.path(), &opts);
    t.join().unwrap();
    assert_eq!(r.overall, Outcome::Canceled);
    assert_eq!(r.statuses()[1..], [(Stage::Run, StageStatus::Canceled), (Stage::Report, StageStatus::Skipped)]);
}

#[test]
fn missing_workspace_is_internal_failure() {
    let spec = spec_from("run: [true]\n");
    let (r, log) = run(&spec, Path::new("/nonexistent/labci-ws"), &RunOptions::default());
    assert_eq!(r.overall, Outcome::Failed);
    let last = r.stage_results.last().unwrap();
    assert_eq!((last.stage, last.status), (Stage::Internal, StageStatus::Failed));
    assert!(String::from_utf8_lossy(&log).contains("[internal] error: workspace missing"));
}

#[test]
fn mock_fingerprint_echoes_configured_node() {
    let backend = LocalBackend::new(RunnerKind::Selfhosted).with_host_facts(HostFacts {
        os_name: "linux".into(),
        os_version: "CentOS 7".into(),
        cpu_count: 56,
        mem_total_mb: 262144,
        hostname: "node01".into(),
    });
    let (fp, lines) = collect_info(&backend, &spec_from("run: [true]\n")).unwrap();
    assert_eq!((fp.cpu_count, fp.mem_total_mb), (56, 262144));
    assert_eq!(fp.runner_kind, RunnerKind::Selfhosted);
    assert!(lines.contains(&"cpu_count=56".to_string()));
    assert!(lines.contains(&"mem_total_mb=262144".to_string()));
}

#[test]
fn toolchain_mismatch_is_a_warning_line() {
    let backend = mock().with_toolchains(BTreeMap::from([("python".to_string(), "3.8".to_string())]));
    let ws = tempfile::tempdir().unwrap();
    let spec = spec_from("language: python\npython: 3.6\nrun: [true]\n");
    let mut log = Vec::new();
    let r = run_job(&spec, &ctx(), &backend, ws.path(), &RunOptions::default(), &mut log);
    assert_eq!(r.overall, Outcome::Succeeded);
    let text = String::from_utf8(log).unwrap();
    assert!(text.contains("[info] toolchain mismatch: requested 3.6, found 3.8\n"), "{text}");
    assert_eq!(r.fingerprint.unwrap().toolchain_reports["python"], "3.8");
}

#[test]
fn fingerprint_lines_lead_the_info_stage() {
    let ws = tempfile::tempdir().unwrap();
    let (r, log) = run(&spec_from("run: [true]\n"), ws.path(), &RunOptions::default());
    let text = String::from_utf8(log).unwrap();
    let first: Vec<&str> = text.lines().take(6).map(|l| l.split_once("] ").unwrap().1).collect();
    assert_eq!(first, ["os_name=linux", "os_version=test", "cpu_count=2", "mem_total_mb=7680", "hostname=mock", "runner_kind=cloud"]);
    assert!(text.contains("[info] backend=local\n"));
    assert!(r.fingerprint.unwrap().captured_at >= r.stage_results[0].started_at);
}

#[cfg(feature = "parallel")]
#[test]
fn local_host_info() {
    let (fp, _) = collect_info(&LocalBackend::new(RunnerKind::Cloud), &spec_from("run: [true]\n")).unwrap();
    assert!(fp.cpu_count >= 1 && fp.mem_total_mb > 0);
}

#[test]
fn deterministic_job_twice_same_digests() {
    let spec = spec_from("run:\n  - seq 1 100 | awk '{s+=$1} END {print s}' > sum.txt\nartifacts: ['*.txt']\n");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, la) = run(&spec, a.path(), &RunOptions::default());
    let (rb, lb) = run(&spec, b.path(), &RunOptions::default());
    assert_eq!(ra.artifacts.entries, rb.artifacts.entries);
    assert_eq!(ra.artifacts.entries[0].digest, Digest::of(b"5050\n"));
    // Logs differ only in timestamps.
    let strip = |log: &[u8]| -> Vec<String> {
        String::from_utf8_lossy(log)
            .lines()
            .filter(|l| !l.contains("captured_at="))
            .map(|l| l.split_once(' ').unwrap().1.to_string())
            .collect()
    };
    assert_eq!(strip(&la), strip(&lb));
}

#[test]
fn bridge_and_local_agree() {
    let spec = spec_from("build: [echo building]\nrun:\n  - echo 42 > answer.txt\nreport: [cat answer.txt]\nartifacts: ['*.txt']\n");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (local, _) = run(&spec, a.path(), &RunOptions::default());
    let (bridge, _) = BatchBridgeBackend::simulated(SimulatedConfig { tick_ms: 5, delay_ticks: 2, ..Default::default() }, mock());
    let mut log = Vec::new();
    let bridged = run_job(&spec, &ctx(), &bridge, b.path(), &RunOptions::default(), &mut log);
    assert_eq!(local.statuses(), bridged.statuses());
    assert_eq!(local.artifacts.entries, bridged.artifacts.entries);
    let text = String::from_utf8(log).unwrap();
    assert!(text.contains("[info] backend=batch_bridge\n"));
    assert!(text.contains("[report] 42\n"));
}

#[test]
fn bridge_lost_batch_fails_stage() {
    let spec = spec_from("install: [true]\nrun: [echo hi]\nreport: [true]\n");
    let ws = tempfile::tempdir().unwrap();
    let (bridge, _) = BatchBridgeBackend::simulated(SimulatedConfig { tick_ms: 5, drop_after: Some(1), ..Default::default() }, mock());
    let mut log = Vec::new();
    let r = run_job(&spec, &ctx(), &bridge, ws.path(), &RunOptions::default(), &mut log);
    use StageStatus::*;
    assert_eq!(r.statuses(), [(Stage::Info, Succeeded), (Stage::Install, Succeeded), (Stage::Run, Failed), (Stage::Report, Skipped)]);
    assert_eq!(r.stage_results[2].note.as_deref(), Some("batch_lost"));
    assert!(String::from_utf8_lossy(&log).contains("[run] batch_lost\n"));
}

#[test]
fn bridge_timeout() {
    let spec = spec_from("run: [sleep 60]\ntimeout_minutes: 1\n");
    let ws = tempfile::tempdir().unwrap();
    let (bridge, _) = BatchBridgeBackend::simulated(SimulatedConfig { tick_ms: 10, ..Default::default() }, mock());
    let opts = RunOptions { minute: Duration::from_secs(1), ..Default::default() };
    let start = Instant::now();
    let r = run_job(&spec, &ctx(), &bridge, ws.path(), &opts, &mut Vec::new());
    assert_eq!(r.overall, Outcome::TimedOut);
    assert!(start.elapsed() < Duration::from_secs(10));
}

fn check_invariants(r: &JobResult, log_len: u64) -> Result<(), TestCaseError> {
    // Stage order is a subsequence of the canonical order.
    let stages: Vec<Stage> = r.stage_results.iter().map(|s| s.stage).collect();
    prop_assert_eq!(stages[0], Stage::Info);
    prop_assert!(stages.windows(2).all(|w| w[0] < w[1]));
    // Ranges are contiguous and cover the log.
    let mut at = 0;
    for s in &r.stage_results {
        prop_assert_eq!(s.log_range.offset, at);
        at += s.log_range.length;
        prop_assert!(s.ended_at >= s.started_at);
        if s.status == StageStatus::Skipped {
            prop_assert!(s.exit_code.is_none() && s.log_range.length == 0);
        }
    }
    prop_assert_eq!(at, log_len);
    // Everything after the first non-success is skipped; the failure is unique.
    let bad: Vec<usize> = r
        .stage_results
        .iter()
        .enumerate()
        .filter(|(_, s)| !matches!(s.status, StageStatus::Succeeded | StageStatus::Skipped))
        .map(|(i, _)| i)
        .collect();
    prop_assert!(bad.len() <= 1);
    match bad.first() {
        Some(&i) => {
            prop_assert!(r.stage_results[i + 1..].iter().all(|s| s.status == StageStatus::Skipped));
            prop_assert!(r.stage_results[..i].iter().all(|s| s.status == StageStatus::Succeeded));
            prop_assert_ne!(r.overall, Outcome::Succeeded);
        }
        None => {
            prop_assert_eq!(r.overall, Outcome::Succeeded);
            prop_assert!(r.stage_results.iter().all(|s| s.status == StageStatus::Succeeded));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn stage_results_respect_invariants(
        present in prop::collection::vec(any::<bool>(), 6),
        fail_at in prop::option::of(0usize..6),
        code in 1i32..5,
    ) {
        let mut plan = Vec::new();
        for (i, stage) in Stage::CONFIGURABLE.into_iter().enumerate() {
            if present[i] || plan.is_empty() && i == 5 {
                let cmd = if fail_at == Some(i) { format!("echo failing; exit {code}") } else { format!("echo {stage}") };
                plan.push(PlannedStage { stage, commands: vec![cmd] });
            }
        }
        let spec = JobSpec {
            env: Default::default(),
            stage_plan: plan,
            artifacts: ArtifactSpec::default(),
            timeout_minutes: 5,
            matrix_index: 0,
        };
        let ws = tempfile::tempdir().unwrap();
        let (r, log) = run(&spec, ws.path(), &RunOptions::default());
        check_invariants(&r, log.len() as u64)?;
        if let Some(failed) = r.stage_results.iter().find(|s| s.status == StageStatus::Failed) {
            prop_assert_eq!(failed.exit_code, Some(code));
        }
    }
}
