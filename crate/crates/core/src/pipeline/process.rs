//! Runs one shell command in its own process group, streaming output lines.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

const TICK: Duration = Duration::from_millis(20);
/// How long to keep reading after the shell exits, for lines still in the pipes.
const DRAIN_WINDOW: Duration = Duration::from_secs(2);

/// Shared cancellation flag.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_canceled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandEnd {
    Exited(i32),
    TimedOut,
    Canceled,
}

fn shell(command: &str) -> Command {
    #[cfg(unix)]
    {
        let mut c = Command::new("sh");
        c.arg("-c").arg(command);
        c
    }
    #[cfg(windows)]
    {
        let mut c = Command::new("cmd");
        c.arg("/C").arg(command);
        c
    }
}

fn pump(reader: impl Read + Send + 'static, tx: mpsc::Sender<Vec<u8>>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut reader = BufReader::new(reader);
        loop {
            let mut line = Vec::new();
            match reader.read_until(b'\n', &mut line) {
                Ok(0) | Err(_) => break,
                Ok(_) => {
                    if line.last() == Some(&b'\n') {
                        line.pop();
                    }
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            }
        }
    })
}

fn exit_code(status: ExitStatus) -> i32 {
    if let Some(code) = status.code() {
        return code;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    -1
}

#[cfg(unix)]
fn signal_group(child: &Child, sig: libc::c_int) {
    // The child leads its own process group, so -pid addresses the whole tree.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), sig);
    }
}

/// SIGTERM the group, wait up to `grace`, then SIGKILL and reap.
fn terminate(child: &mut Child, grace: Duration) {
    #[cfg(unix)]
    {
        signal_group(child, libc::SIGTERM);
        let until = Instant::now() + grace;
        while Instant::now() < until {
            if let Ok(Some(_)) = child.try_wait() {
                signal_group(child, libc::SIGKILL);
                return;
            }
            thread::sleep(TICK);
        }
        signal_group(child, libc::SIGKILL);
    }
    #[cfg(not(unix))]
    {
        let _ = grace;
        let _ = child.kill();
    }
    let _ = child.wait();
}

pub struct CommandSpec<'a> {
    pub command: &'a str,
    pub cwd: &'a Path,
    pub env: &'a BTreeMap<String, String>,
}

/// Runs `spec.command` through the platform shell with merged stdout/stderr.
/// Each output line (without its newline) is passed to `on_line` as it arrives.
pub fn run_command(
    spec: &CommandSpec<'_>,
    on_line: &mut dyn FnMut(&[u8]),
    deadline: Instant,
    cancel: &CancelToken,
    grace: Duration,
) -> std::io::Result<CommandEnd> {
    let mut cmd = shell(spec.command);
    cmd.current_dir(spec.cwd)
        .envs(spec.env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let mut child = cmd.spawn()?;
    let (tx, rx) = mpsc::channel();
    let out = pump(child.stdout.take().expect("piped stdout"), tx.clone());
    let err = pump(child.stderr.take().expect("piped stderr"), tx);

    let mut end = None;
    loop {
        match rx.recv_timeout(TICK) {
            Ok(line) => on_line(&line),
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                // Both pipes closed; only the exit status is left.
                if end.is_none() {
                    end = Some(wait_until(&mut child, deadline, cancel, grace)?);
                }
                break;
            }
        }
        if let Some(status) = child.try_wait()? {
            end = Some(CommandEnd::Exited(exit_code(status)));
            break;
        }
        if cancel.is_canceled() {
            terminate(&mut child, grace);
            end = Some(CommandEnd::Canceled);
            break;
        }
        if Instant::now() >= deadline {
            terminate(&mut child, grace);
            end = Some(CommandEnd::TimedOut);
            break;
        }
    }

    // Drain what is already buffered. A background grandchild may keep a pipe
    // open indefinitely, so this is bounded.
    let drain_until = Instant::now() + DRAIN_WINDOW;
    loop {
        let left = drain_until.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left.min(TICK)) {
            Ok(line) => on_line(&line),
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
            Err(mpsc::RecvTimeoutError::Timeout) if left.is_zero() => break,
            Err(mpsc::RecvTimeoutError::Timeout) => {}
        }
    }
    if out.is_finished() {
        let _ = out.join();
    }
    if err.is_finished() {
        let _ = err.join();
    }
    Ok(end.expect("loop sets an end state"))
}

fn wait_until(
    child: &mut Child,
    deadline: Instant,
    cancel: &CancelToken,
    grace: Duration,
) -> std::io::Result<CommandEnd> {
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(CommandEnd::Exited(exit_code(status)));
        }
        if cancel.is_canceled() {
            terminate(child, grace);
            return Ok(CommandEnd::Canceled);
        }
        if Instant::now() >= deadline {
            terminate(child, grace);
            return Ok(CommandEnd::TimedOut);
        }
        thread::sleep(TICK);
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;

    fn run(cmd: &str, deadline: Duration) -> (CommandEnd, Vec<String>, Duration) {
        let dir = tempfile::tempdir().unwrap();
        let env = BTreeMap::from([("GREETING".to_string(), "hi".to_string())]);
        let mut lines = Vec::new();
        let start = Instant::now();
        let end = run_command(
            &CommandSpec { command: cmd, cwd: dir.path(), env: &env },
            &mut |l| lines.push(String::from_utf8_lossy(l).into_owned()),
            start + deadline,
            &CancelToken::new(),
            Duration::from_secs(5),
        )
        .unwrap();
        (end, lines, start.elapsed())
    }

    #[test]
    fn true_succeeds() {
        assert_eq!(run("true", Duration::from_secs(10)).0, CommandEnd::Exited(0));
    }

    #[test]
    fn exit_code_propagates() {
        assert_eq!(run("sh -c 'exit 3'", Duration::from_secs(10)).0, CommandEnd::Exited(3));
    }

    #[test]
    fn captures_both_streams_and_env() {
        let (end, lines, _) = run("echo $GREETING; echo oops 1>&2; printf tail", Duration::from_secs(10));
        assert_eq!(end, CommandEnd::Exited(0));
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(sorted, ["hi", "oops", "tail"]);
    }

    #[test]
    fn deadline_kills_process_tree() {
        let (end, _, elapsed) = run("sleep 120", Duration::from_secs(1));
        assert_eq!(end, CommandEnd::TimedOut);
        assert!(elapsed < Duration::from_secs(5), "{elapsed:?}");
    }

    #[test]
    fn cancel_stops_command() {
        let dir = tempfile::tempdir().unwrap();
        let cancel = CancelToken::new();
        let c2 = cancel.clone();
        let t = thread::spawn(move || {
            thread::sleep(Duration::from_millis(300));
            c2.cancel();
        });
        let start = Instant::now();
        let end = run_command(
            &CommandSpec { command: "sleep 60", cwd: dir.path(), env: &BTreeMap::new() },
            &mut |_| {},
            Instant::now() + Duration::from_secs(60),
            &cancel,
            Duration::from_secs(5),
        )
        .unwrap();
        t.join().unwrap();
        assert_eq!(end, CommandEnd::Canceled);
        assert!(start.elapsed() < Duration::from_secs(5));
    }
}
