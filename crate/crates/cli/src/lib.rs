//! Code shared by the `labci` and `labci-runner` binaries.

pub mod agent;

use std::fmt;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use labci::runner::ApiError;

/// Everything that ends a command early. Each variant is one exit code.
#[derive(Debug)]
pub enum Failure {
    /// The pipeline failed or two runs diverged: exit 1.
    Pipeline(String),
    /// Bad flags, unreadable input or an invalid config: exit 2.
    Usage(String),
    /// Server unreachable, refused the token, or could not bind: exit 3.
    Network(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Pipeline(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Network(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Pipeline(m) | Failure::Usage(m) | Failure::Network(m) => f.write_str(m),
        }
    }
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        match e {
            ApiError::Auth(_) | ApiError::Transient(_) => Failure::Network(e.to_string()),
            ApiError::Rejected { ref code, .. } if code == "cross_commit_refused" || code == "not_terminal" => {
                Failure::Pipeline(e.to_string())
            }
            ApiError::Rejected { .. } => Failure::Usage(e.to_string()),
        }
    }
}

/// Converts a command outcome into the process exit status, printing the
/// error if there is one.
pub fn exit_with(result: Result<u8, Failure>) -> ExitCode {
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Restores the default SIGPIPE action so `labci ... | head` ends quietly
/// instead of panicking on a closed stdout.
pub fn reset_sigpipe() {
    #[cfg(unix)]
    // SAFETY: called at startup before any threads exist.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

/// Logs go to stderr; `RUST_LOG` overrides the default `warn` level.
pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

/// Resolves once SIGINT or SIGTERM arrives.
pub async fn shutdown_signal() {
    let ctrl_c = tokio::signal::ctrl_c();
    #[cfg(unix)]
    {
        let mut term = match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(s) => s,
            Err(_) => {
                let _ = ctrl_c.await;
                return;
            }
        };
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = ctrl_c.await;
    }
}

/// A flag set by the first SIGINT/SIGTERM. A second signal exits at once.
pub fn stop_flag_on_signal() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    std::thread::spawn(move || {
        let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(_) => return,
        };
        rt.block_on(async {
            shutdown_signal().await;
            eprintln!("stopping after the current job (signal again to abort)");
            flag.store(true, Ordering::SeqCst);
            shutdown_signal().await;
            std::process::exit(130);
        });
    });
    stop
}
