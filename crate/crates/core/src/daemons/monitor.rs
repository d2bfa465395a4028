//! Periodic housekeeping: timeouts, retries and the cleanup cycle back
//! to WAITING.

use tracing::{info, warn};

use super::DaemonError;
use crate::datastore::{Datastore, DatastoreError};
use crate::lifecycle::{check_timeouts, grant_or_exhaust, Event, JobState, TimeoutPolicy, UnitKey};
use crate::par::Exec;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HousekeepingReport {
    pub timed_out: usize,
    pub retried: usize,
    pub failed: usize,
    pub recycled: usize,
}

fn cas(db: &Datastore, key: &UnitKey, expected: JobState, event: Event) -> Result<bool, DatastoreError> {
    match db.update_unit_state(key, expected, event, None) {
        Ok(_) => Ok(true),
        Err(DatastoreError::StaleState { .. } | DatastoreError::IllegalTransition(_) | DatastoreError::UnknownJob(_)) => {
            Ok(false)
        }
        Err(e) => Err(e),
    }
}

pub fn housekeeping(db: &Datastore, policy: &TimeoutPolicy, exec: Exec) -> Result<HousekeepingReport, DaemonError> {
    let mut report = HousekeepingReport::default();

    // aggregate rows of task graphs follow their tasks and never time out
    let live: Vec<_> = db
        .records_in_states(&[JobState::Queueing, JobState::Queued, JobState::Processing, JobState::Copying])?
        .into_iter()
        .filter(|u| u.schedulable())
        .collect();
    for (u, event) in check_timeouts(&live, policy, db.now(), exec) {
        if cas(db, &u.key, u.state, event)? {
            warn!(key = %u.key, state = %u.state, "timed out");
            db.set_error(&u.key, &format!("timed out in {}", u.state))?;
            report.timed_out += 1;
        }
    }

    for u in db.records_in_states(&[JobState::Error])? {
        let event = grant_or_exhaust(&u, policy);
        if cas(db, &u.key, JobState::Error, event)? {
            match event {
                Event::RetryExhausted => {
                    info!(key = %u.key, retries = u.retries, "retries exhausted");
                    report.failed += 1;
                }
                _ => report.retried += 1,
            }
        }
    }

    for u in db.records_in_states(&[JobState::Reset])? {
        if cas(db, &u.key, JobState::Reset, Event::CleanupStarted)? && cas(db, &u.key, JobState::Cleaning, Event::CleanupDone)? {
            report.recycled += 1;
        }
    }
    // rows left in CLEANING by an interrupted pass
    for u in db.records_in_states(&[JobState::Cleaning])? {
        if cas(db, &u.key, JobState::Cleaning, Event::CleanupDone)? {
            report.recycled += 1;
        }
    }
    Ok(report)
}
