//! Job and task state machine.
//!
//! ```text
//!  WAITING -> QUEUEING -> QUEUED -> PROCESSING -> COPYING -> OK
//!     ^
//!     |   (timeout from QUEUEING..COPYING)     (error from any live state)
//!  CLEANING <- RESET <---------------------------- ERROR -> FAILED
//!               ^  ^-- SUSPENDED (operator)                  |
//!               +--------------------------------------------+ (operator reset)
//! ```

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::par::Exec;

/// Milliseconds since the Unix epoch.
pub type Millis = i64;

pub fn now_ms() -> Millis {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as Millis)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobState {
    Waiting,
    Queueing,
    Queued,
    Processing,
    Copying,
    Ok,
    Error,
    Reset,
    Suspended,
    Failed,
    Cleaning,
}

impl JobState {
    pub const ALL: [JobState; 11] = [
        JobState::Waiting,
        JobState::Queueing,
        JobState::Queued,
        JobState::Processing,
        JobState::Copying,
        JobState::Ok,
        JobState::Error,
        JobState::Reset,
        JobState::Suspended,
        JobState::Failed,
        JobState::Cleaning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Waiting => "WAITING",
            JobState::Queueing => "QUEUEING",
            JobState::Queued => "QUEUED",
            JobState::Processing => "PROCESSING",
            JobState::Copying => "COPYING",
            JobState::Ok => "OK",
            JobState::Error => "ERROR",
            JobState::Reset => "RESET",
            JobState::Suspended => "SUSPENDED",
            JobState::Failed => "FAILED",
            JobState::Cleaning => "CLEANING",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Ok | JobState::Failed)
    }

    /// Submitted to a backend and not yet finished.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            JobState::Queueing | JobState::Queued | JobState::Processing | JobState::Copying
        )
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown state {0:?}")]
pub struct UnknownState(pub String);

impl FromStr for JobState {
    type Err = UnknownState;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownState(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    EnqueueRequested,
    SubmittedToBackend,
    PilotStarted,
    WorkCompleted,
    CopyCompleted,
    ErrorReported,
    TimeoutExpired,
    OperatorSuspend,
    OperatorResume,
    OperatorReset,
    RetryGranted,
    RetryExhausted,
    /// The automatic RESET -> CLEANING step.
    CleanupStarted,
    CleanupDone,
}

impl Event {
    pub const ALL: [Event; 14] = [
        Event::EnqueueRequested,
        Event::SubmittedToBackend,
        Event::PilotStarted,
        Event::WorkCompleted,
        Event::CopyCompleted,
        Event::ErrorReported,
        Event::TimeoutExpired,
        Event::OperatorSuspend,
        Event::OperatorResume,
        Event::OperatorReset,
        Event::RetryGranted,
        Event::RetryExhausted,
        Event::CleanupStarted,
        Event::CleanupDone,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition: {event:?} in state {state}")]
pub struct IllegalTransition {
    pub state: JobState,
    pub event: Event,
}

/// The fixed transition table.
pub fn transition(current: JobState, event: Event) -> Result<JobState, IllegalTransition> {
    use Event as E;
    use JobState as S;
    let next = match (current, event) {
        (S::Waiting, E::EnqueueRequested) => S::Queueing,
        (S::Queueing, E::SubmittedToBackend) => S::Queued,
        (S::Queued, E::PilotStarted) => S::Processing,
        (S::Processing, E::WorkCompleted) => S::Copying,
        (S::Copying, E::CopyCompleted) => S::Ok,
        (S::Queueing | S::Queued | S::Processing | S::Copying, E::TimeoutExpired) => S::Reset,
        (S::Error, E::RetryGranted) => S::Reset,
        (S::Error, E::RetryExhausted) => S::Failed,
        (S::Reset, E::CleanupStarted) => S::Cleaning,
        (S::Cleaning, E::CleanupDone) => S::Waiting,
        (S::Suspended, E::OperatorResume) => S::Reset,
        (S::Failed, E::OperatorReset) => S::Reset,
        (s, E::ErrorReported) if !s.is_terminal() && s != S::Error => S::Error,
        (s, E::OperatorSuspend) if !s.is_terminal() && s != S::Suspended => S::Suspended,
        (state, event) => return Err(IllegalTransition { state, event }),
    };
    Ok(next)
}

/// Identifies one schedulable unit: a whole job, or one task of a job.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitKey {
    pub dataset_id: i64,
    pub job_index: u64,
    pub task: Option<String>,
}

impl UnitKey {
    pub fn job(dataset_id: i64, job_index: u64) -> Self {
        UnitKey {
            dataset_id,
            job_index,
            task: None,
        }
    }

    pub fn task(dataset_id: i64, job_index: u64, task: &str) -> Self {
        UnitKey {
            dataset_id,
            job_index,
            task: Some(task.to_string()),
        }
    }

    pub fn job_key(&self) -> UnitKey {
        UnitKey::job(self.dataset_id, self.job_index)
    }
}

impl fmt::Display for UnitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.dataset_id, self.job_index)?;
        if let Some(t) = &self.task {
            write!(f, "/{t}")?;
        }
        Ok(())
    }
}

impl FromStr for UnitKey {
    type Err = String;

    /// Parses `dataset.job` or `dataset.job/task`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (head, task) = match s.split_once('/') {
            Some((h, t)) => (h, Some(t.to_string())),
            None => (s, None),
        };
        let (ds, job) = head.split_once('.').ok_or_else(|| format!("bad job key {s:?}"))?;
        Ok(UnitKey {
            dataset_id: ds.parse().map_err(|_| format!("bad dataset id in {s:?}"))?,
            job_index: job.parse().map_err(|_| format!("bad job index in {s:?}"))?,
            task,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub dataset_id: i64,
    pub job_index: u64,
    pub state: JobState,
    pub retries: u32,
    pub passkey: String,
    pub host: Option<String>,
    pub grid_id: Option<String>,
    pub site: Option<String>,
    pub last_update: Millis,
    pub state_entered: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub dataset_id: i64,
    pub job_index: u64,
    pub task_name: String,
    pub state: JobState,
    pub retries: u32,
    pub passkey: String,
    pub host: Option<String>,
    pub grid_id: Option<String>,
    pub site: Option<String>,
    pub last_update: Millis,
    pub state_entered: Millis,
}

/// Common view of job and task records for timeout and retry decisions.
pub trait Tracked {
    fn key(&self) -> UnitKey;
    fn state(&self) -> JobState;
    fn retries(&self) -> u32;
    fn state_entered(&self) -> Millis;
    fn last_update(&self) -> Millis;
}

impl Tracked for JobRecord {
    fn key(&self) -> UnitKey {
        UnitKey::job(self.dataset_id, self.job_index)
    }
    fn state(&self) -> JobState {
        self.state
    }
    fn retries(&self) -> u32 {
        self.retries
    }
    fn state_entered(&self) -> Millis {
        self.state_entered
    }
    fn last_update(&self) -> Millis {
        self.last_update
    }
}

impl Tracked for TaskRecord {
    fn key(&self) -> UnitKey {
        UnitKey::task(self.dataset_id, self.job_index, &self.task_name)
    }
    fn state(&self) -> JobState {
        self.state
    }
    fn retries(&self) -> u32 {
        self.retries
    }
    fn state_entered(&self) -> Millis {
        self.state_entered
    }
    fn last_update(&self) -> Millis {
        self.last_update
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeoutPolicy {
    /// Timeouts for the states that can expire (QUEUEING, QUEUED,
    /// PROCESSING, COPYING).
    pub timeouts: BTreeMap<JobState, Duration>,
    /// `None` retries forever.
    pub max_retries: Option<u32>,
}

impl Default for TimeoutPolicy {
    fn default() -> Self {
        let mut timeouts = BTreeMap::new();
        timeouts.insert(JobState::Queueing, Duration::from_secs(600));
        timeouts.insert(JobState::Queued, Duration::from_secs(7 * 24 * 3600));
        timeouts.insert(JobState::Processing, Duration::from_secs(2 * 24 * 3600));
        timeouts.insert(JobState::Copying, Duration::from_secs(6 * 3600));
        TimeoutPolicy {
            timeouts,
            max_retries: Some(3),
        }
    }
}

impl TimeoutPolicy {
    pub fn uniform(timeout: Duration, max_retries: Option<u32>) -> Self {
        let mut p = TimeoutPolicy::default();
        for t in p.timeouts.values_mut() {
            *t = timeout;
        }
        p.max_retries = max_retries;
        p
    }

    pub fn with_timeout(mut self, state: JobState, timeout: Duration) -> Self {
        self.timeouts.insert(state, timeout);
        self
    }

    pub fn timeout(&self, state: JobState) -> Option<Duration> {
        self.timeouts.get(&state).copied()
    }
}

/// Records whose current state has outlived its timeout, ordered by key.
///
/// A record's clock starts at the later of `state_entered` and
/// `last_update`, so keepalives hold off the timeout. Expiry is strict:
/// a record exactly at its timeout is not flagged.
pub fn check_timeouts<'a, R: Tracked + Sync>(
    records: &'a [R],
    policy: &TimeoutPolicy,
    now: Millis,
    exec: Exec,
) -> Vec<(&'a R, Event)> {
    let expired = exec.map(records, |r| {
        policy.timeout(r.state()).is_some_and(|limit| {
            let since = r.state_entered().max(r.last_update());
            now - since > limit.as_millis() as Millis
        })
    });
    let mut due: Vec<&R> = records
        .iter()
        .zip(expired)
        .filter_map(|(r, e)| e.then_some(r))
        .collect();
    due.sort_by(|a, b| a.key().cmp(&b.key()).then(Ordering::Equal));
    due.into_iter().map(|r| (r, Event::TimeoutExpired)).collect()
}

/// Decides the fate of an errored record.
pub fn grant_or_exhaust<R: Tracked>(record: &R, policy: &TimeoutPolicy) -> Event {
    match policy.max_retries {
        Some(max) if record.retries() >= max => Event::RetryExhausted,
        _ => Event::RetryGranted,
    }
}
