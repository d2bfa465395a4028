//! Output verification and garbage collection.
//!
//! Units in COPYING have their declared outputs checked against storage.
//! Leftover submission files and pilot scratch directories are removed
//! once their unit no longer needs them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use tracing::{debug, info, warn};

use super::DaemonError;
use crate::datastore::{Datastore, DatastoreError, OutputRecord};
use crate::digest::md5_hex;
use crate::lifecycle::{Event, JobState, UnitKey};
use crate::par::Exec;
use crate::storage::Storage;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GcReport {
    pub verified: usize,
    pub corrupt: usize,
    pub quarantined: usize,
    pub scripts_removed: usize,
    pub logs_removed: usize,
    pub scratch_removed: usize,
}

#[derive(Debug, Clone)]
pub struct DhSettings {
    /// Parent of the per-site spool directories.
    pub spool: PathBuf,
    /// Directories pilots create scratch space in.
    pub scratch_roots: Vec<PathBuf>,
    /// Scratch directories younger than this are left alone.
    pub scratch_grace: Duration,
}

/// Name of a pilot's scratch directory, derived from its passkey so that
/// a stale directory can be told from a live one.
pub fn scratch_dir_name(passkey: &str) -> String {
    format!("pk-{}", &md5_hex(passkey.as_bytes())[..8])
}

/// Recovers the unit key from `<tag>-<dataset>.<job>[-<task>]`.
pub fn key_from_submit_name(name: &str) -> Option<UnitKey> {
    let (head, last) = name.rsplit_once('-')?;
    if let Ok(k) = last.parse::<UnitKey>() {
        return Some(k);
    }
    let (_, mid) = head.rsplit_once('-')?;
    let k: UnitKey = mid.parse().ok()?;
    (!last.is_empty()).then(|| UnitKey::task(k.dataset_id, k.job_index, last))
}

enum Verdict {
    Good,
    Bad(Vec<(OutputRecord, String)>),
    Unavailable(String),
}

fn verify(storage: &Storage, outputs: &[OutputRecord]) -> Verdict {
    let mut bad = Vec::new();
    for o in outputs {
        match storage.md5(&o.url) {
            Ok(d) if d.eq_ignore_ascii_case(&o.md5) => {}
            Ok(d) => bad.push((o.clone(), format!("{}: digest {d}, declared {}", o.name, o.md5))),
            Err(crate::storage::StorageError::NotFound(_)) => bad.push((o.clone(), format!("{}: missing", o.name))),
            Err(e) => return Verdict::Unavailable(e.to_string()),
        }
    }
    if bad.is_empty() {
        Verdict::Good
    } else {
        Verdict::Bad(bad)
    }
}

fn stale_ok(r: Result<JobState, DatastoreError>) -> Result<bool, DatastoreError> {
    match r {
        Ok(_) => Ok(true),
        Err(DatastoreError::StaleState { .. } | DatastoreError::IllegalTransition(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

fn remove_file(p: &Path) -> bool {
    fs::remove_file(p).is_ok()
}

pub fn soapdh_cycle(db: &Datastore, storage: &Storage, settings: &DhSettings, exec: Exec) -> Result<GcReport, DaemonError> {
    let mut report = GcReport::default();

    // 1. verify outputs of finished units
    let copying: Vec<_> = db
        .records_in_states(&[JobState::Copying])?
        .into_iter()
        .filter(|u| u.schedulable())
        .map(|u| {
            let outputs = db.outputs(&u.key)?;
            Ok((u, outputs))
        })
        .collect::<Result<_, DatastoreError>>()?;
    let verdicts = exec.map(&copying, |(_, outputs)| verify(storage, outputs));
    for ((u, _), verdict) in copying.iter().zip(verdicts) {
        match verdict {
            Verdict::Good => {
                if stale_ok(db.update_unit_state(&u.key, JobState::Copying, Event::CopyCompleted, None))? {
                    report.verified += 1;
                }
            }
            Verdict::Bad(bad) => {
                let message = bad.iter().map(|(_, m)| m.as_str()).collect::<Vec<_>>().join("; ");
                warn!(key = %u.key, %message, "output verification failed");
                for (o, _) in &bad {
                    match storage.quarantine(&o.url) {
                        Ok(q) => {
                            info!(url = %o.url, to = %q, "quarantined");
                            report.quarantined += 1;
                        }
                        Err(e) => debug!(url = %o.url, error = %e, "not quarantined"),
                    }
                }
                db.set_error(&u.key, &message)?;
                if stale_ok(db.update_unit_state(&u.key, JobState::Copying, Event::ErrorReported, None))? {
                    report.corrupt += 1;
                }
            }
            // storage trouble is not the job's fault; try again next pass
            Verdict::Unavailable(e) => warn!(key = %u.key, error = %e, "cannot verify outputs"),
        }
    }

    // 2. submission scripts and logs
    if let Ok(sites) = fs::read_dir(&settings.spool) {
        for dir in sites.flatten() {
            if dir.file_name() == "unmonitored" || !dir.path().is_dir() {
                continue;
            }
            let Ok(entries) = fs::read_dir(dir.path()) else { continue };
            for e in entries.flatten() {
                let path = e.path();
                let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".sh")) else {
                    continue;
                };
                let state = match key_from_submit_name(name) {
                    Some(k) => db.unit(&k)?.map(|u| u.state),
                    None => None,
                };
                let log = |ext: &str| dir.path().join(format!("{name}.{ext}"));
                match state {
                    Some(JobState::Ok) => {
                        report.scripts_removed += remove_file(&path) as usize;
                        report.logs_removed += remove_file(&log("out")) as usize + remove_file(&log("err")) as usize;
                    }
                    Some(s) if s.is_active() || s == JobState::Copying => {}
                    // failed and interrupted runs keep their logs for diagnosis
                    _ => report.scripts_removed += remove_file(&path) as usize,
                }
            }
        }
    }

    // 3. scratch directories of pilots that are gone
    let live: std::collections::HashSet<String> = db
        .records_in_states(&[JobState::Queueing, JobState::Queued, JobState::Processing])?
        .iter()
        .map(|u| scratch_dir_name(&u.passkey))
        .collect();
    let now = SystemTime::now();
    for root in &settings.scratch_roots {
        let Ok(entries) = fs::read_dir(root) else { continue };
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if !name.starts_with("pk-") || live.contains(&name) {
                continue;
            }
            let old = e
                .metadata()
                .and_then(|m| m.modified())
                .ok()
                .and_then(|t| now.duration_since(t).ok())
                .is_some_and(|age| age >= settings.scratch_grace);
            if old && fs::remove_dir_all(e.path()).is_ok() {
                report.scratch_removed += 1;
            }
        }
    }
    Ok(report)
}
