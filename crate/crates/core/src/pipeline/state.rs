//! Server-side job lifecycle: `queued -> claimed -> running -> terminal`.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::Outcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Claimed,
    Running,
    Succeeded,
    Failed,
    TimedOut,
    Canceled,
}

impl JobState {
    pub const ALL: [JobState; 7] = [
        JobState::Queued,
        JobState::Claimed,
        JobState::Running,
        JobState::Succeeded,
        JobState::Failed,
        JobState::TimedOut,
        JobState::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Succeeded | JobState::Failed | JobState::TimedOut | JobState::Canceled
        )
    }

    pub fn is_active(self) -> bool {
        matches!(self, JobState::Claimed | JobState::Running)
    }

    /// The outcome a terminal state records; `None` while the job is live.
    pub fn outcome(self) -> Option<Outcome> {
        match self {
            JobState::Succeeded => Some(Outcome::Succeeded),
            JobState::Failed => Some(Outcome::Failed),
            JobState::TimedOut => Some(Outcome::TimedOut),
            JobState::Canceled => Some(Outcome::Canceled),
            JobState::Queued | JobState::Claimed | JobState::Running => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Claimed => "claimed",
            JobState::Running => "running",
            JobState::Succeeded => "succeeded",
            JobState::Failed => "failed",
            JobState::TimedOut => "timed_out",
            JobState::Canceled => "canceled",
        }
    }
}

impl From<Outcome> for JobState {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Succeeded => JobState::Succeeded,
            Outcome::Failed => JobState::Failed,
            Outcome::TimedOut => JobState::TimedOut,
            Outcome::Canceled => JobState::Canceled,
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobEvent {
    Claimed,
    Started,
    StageDone,
    Completed(Outcome),
    CancelRequested,
    DeadlineExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition: {event:?} in state {state}")]
pub struct IllegalTransition {
    pub state: JobState,
    pub event: JobEvent,
}

/// The pure transition function. Terminal states reject every event.
pub fn advance(state: JobState, event: JobEvent) -> Result<JobState, IllegalTransition> {
    use JobEvent as E;
    use JobState as S;
    let next = match (state, event) {
        (S::Queued, E::Claimed) => S::Claimed,
        (S::Queued, E::CancelRequested) => S::Canceled,
        (S::Claimed, E::Started) => S::Running,
        (S::Claimed | S::Running, E::Completed(o)) => o.into(),
        (S::Claimed | S::Running, E::CancelRequested) => S::Canceled,
        (S::Claimed | S::Running, E::DeadlineExceeded) => S::TimedOut,
        (S::Running, E::StageDone) => S::Running,
        _ => return Err(IllegalTransition { state, event }),
    };
    Ok(next)
}
