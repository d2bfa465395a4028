//! Job and task rows: claiming, compare-and-swap transitions, and the
//! coupling between a task graph's tasks and their job.
//!
//! A monolithic dataset schedules whole jobs; its single task row mirrors
//! the job. A dataset with explicit tasks schedules tasks, and the job row
//! is an aggregate driven from its tasks' transitions.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use rusqlite::{params, Connection, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};

use super::{parse_state, Datastore, DatastoreError, OutputRecord, Result, StatMap};
use crate::dagengine::{match_requirements, ready_tasks, SiteCapabilities, TaskDag};
use crate::lifecycle::{
    transition, Event, IllegalTransition, JobRecord, JobState, Millis, TaskRecord, Tracked, UnitKey,
};
use crate::rpc::auth::{new_passkey, passkey_matches};
use crate::steering::{ResourceRequirements, IMPLICIT_TASK};

/// A job or task row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub key: UnitKey,
    pub state: JobState,
    pub retries: u32,
    pub passkey: String,
    pub host: Option<String>,
    pub grid_id: Option<String>,
    pub site: Option<String>,
    pub last_update: Millis,
    pub state_entered: Millis,
    pub error: Option<String>,
    /// The aggregate row of a job whose tasks are scheduled one by one.
    pub dag_job: bool,
}

impl Tracked for UnitRecord {
    fn key(&self) -> UnitKey {
        self.key.clone()
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

impl UnitRecord {
    /// Whether this row is handed to a backend (as opposed to an aggregate).
    pub fn schedulable(&self) -> bool {
        !self.dag_job
    }
}

/// A unit handed to a site by [`Datastore::claim_units`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub key: UnitKey,
    pub passkey: String,
    pub requirements: ResourceRequirements,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlAction {
    Suspend,
    Resume,
    Reset,
}

impl ControlAction {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlAction::Suspend => "suspend",
            ControlAction::Resume => "resume",
            ControlAction::Reset => "reset",
        }
    }
}

impl FromStr for ControlAction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "suspend" => Ok(ControlAction::Suspend),
            "resume" => Ok(ControlAction::Resume),
            "reset" => Ok(ControlAction::Reset),
            _ => Err(format!("unknown action {s:?}")),
        }
    }
}

/// An update sent by a running pilot.
#[derive(Debug, Clone, PartialEq)]
pub enum PilotReport {
    Started { host: String },
    Keepalive,
    Stats(StatMap),
    Finished { outputs: Vec<OutputRecord> },
    Error { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Table {
    Job,
    Task,
}

#[derive(Debug, Clone)]
struct Loc {
    table: Table,
    key: UnitKey,
    dag: bool,
}

fn locate(c: &Connection, key: &UnitKey) -> Result<Loc> {
    let is_dag: bool = c
        .query_row("SELECT is_dag FROM dataset WHERE dataset_id = ?1", [key.dataset_id], |r| r.get(0))
        .optional()?
        .ok_or_else(|| DatastoreError::UnknownJob(key.clone()))?;
    let job = key.job_key();
    match (is_dag, key.task.as_deref()) {
        (false, None) => Ok(Loc { table: Table::Job, key: job, dag: false }),
        (false, Some(IMPLICIT_TASK)) => Ok(Loc { table: Table::Job, key: job, dag: false }),
        (false, Some(_)) => Err(DatastoreError::UnknownJob(key.clone())),
        (true, None) => Ok(Loc { table: Table::Job, key: job, dag: true }),
        (true, Some(_)) => Ok(Loc { table: Table::Task, key: key.clone(), dag: true }),
    }
}

const COLUMNS: &str =
    "state, retries, passkey, host, grid_id, site, last_update, state_entered, error";

fn row_to_record(r: &rusqlite::Row, key: UnitKey, dag_job: bool) -> rusqlite::Result<(String, UnitRecord)> {
    let state: String = r.get(0)?;
    Ok((
        state,
        UnitRecord {
            key,
            state: JobState::Waiting,
            retries: r.get(1)?,
            passkey: r.get(2)?,
            host: r.get(3)?,
            grid_id: r.get(4)?,
            site: r.get(5)?,
            last_update: r.get(6)?,
            state_entered: r.get(7)?,
            error: r.get(8)?,
            dag_job,
        },
    ))
}

fn finish(row: Option<(String, UnitRecord)>) -> Result<Option<UnitRecord>> {
    match row {
        None => Ok(None),
        Some((s, mut rec)) => {
            rec.state = parse_state(&s)?;
            Ok(Some(rec))
        }
    }
}

fn load(c: &Connection, loc: &Loc) -> Result<Option<UnitRecord>> {
    let k = &loc.key;
    let row = match loc.table {
        Table::Job => c
            .query_row(
                &format!("SELECT {COLUMNS} FROM job WHERE dataset_id = ?1 AND job_index = ?2"),
                params![k.dataset_id, k.job_index as i64],
                |r| row_to_record(r, k.clone(), loc.dag),
            )
            .optional()?,
        Table::Task => c
            .query_row(
                &format!(
                    "SELECT {COLUMNS} FROM task WHERE dataset_id = ?1 AND job_index = ?2 AND task_name = ?3"
                ),
                params![k.dataset_id, k.job_index as i64, k.task],
                |r| row_to_record(r, k.clone(), false),
            )
            .optional()?,
    };
    finish(row)
}

fn load_existing(c: &Connection, loc: &Loc) -> Result<UnitRecord> {
    load(c, loc)?.ok_or_else(|| DatastoreError::UnknownJob(loc.key.clone()))
}

/// `UPDATE <table> SET <assignments> WHERE <unit>`; `?1..?3` are the key.
fn update_unit(tx: &Transaction, loc: &Loc, assignments: &str, extra: &[&dyn rusqlite::ToSql]) -> Result<()> {
    let k = &loc.key;
    let job_index = k.job_index as i64;
    let task = k.task.clone().unwrap_or_default();
    let mut args: Vec<&dyn rusqlite::ToSql> = vec![&k.dataset_id, &job_index, &task];
    args.extend_from_slice(extra);
    let sql = match loc.table {
        Table::Job => format!(
            "UPDATE job SET {assignments} WHERE dataset_id = ?1 AND job_index = ?2 AND ?3 = ?3"
        ),
        Table::Task => format!(
            "UPDATE task SET {assignments} WHERE dataset_id = ?1 AND job_index = ?2 AND task_name = ?3"
        ),
    };
    tx.execute(&sql, args.as_slice())?;
    Ok(())
}

fn event_name(e: Event) -> String {
    format!("{e:?}")
}

fn log_event(
    tx: &Transaction,
    key: &UnitKey,
    event: &str,
    from: JobState,
    to: JobState,
    site: Option<&str>,
    now: Millis,
) -> Result<()> {
    tx.prepare_cached(
        "INSERT INTO event_log (ts_ms, dataset_id, job_index, task_name, event, from_state, to_state, site)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
    )?
    .execute(params![
        now,
        key.dataset_id,
        key.job_index as i64,
        key.task,
        event,
        from.as_str(),
        to.as_str(),
        site
    ])?;
    Ok(())
}

fn clear_attempt_data(tx: &Transaction, loc: &Loc) -> Result<()> {
    let k = &loc.key;
    let job = k.job_index as i64;
    match (loc.table, &k.task) {
        (Table::Task, Some(t)) => {
            for table in ["job_statistics", "job_output"] {
                tx.execute(
                    &format!("DELETE FROM {table} WHERE dataset_id = ?1 AND job_index = ?2 AND task_name = ?3"),
                    params![k.dataset_id, job, t],
                )?;
            }
        }
        _ => {
            for table in ["job_statistics", "job_output"] {
                tx.execute(
                    &format!("DELETE FROM {table} WHERE dataset_id = ?1 AND job_index = ?2"),
                    params![k.dataset_id, job],
                )?;
            }
        }
    }
    Ok(())
}

/// Applies one lifecycle event to a stored row, with all side effects.
fn apply(tx: &Transaction, loc: &Loc, rec: &UnitRecord, event: Event, now: Millis) -> Result<JobState> {
    let next = transition(rec.state, event)?;
    update_unit(
        tx,
        loc,
        "state = ?4, state_entered = ?5, last_update = ?5",
        &[&next.as_str(), &now],
    )?;
    if event == Event::RetryGranted {
        update_unit(tx, loc, "retries = retries + 1", &[])?;
    }
    if next == JobState::Reset {
        let key = new_passkey();
        update_unit(tx, loc, "passkey = ?4, host = NULL", &[&key])?;
        clear_attempt_data(tx, loc)?;
    }
    if next == JobState::Waiting {
        update_unit(tx, loc, "grid_id = NULL, site = NULL", &[])?;
    }
    log_event(tx, &loc.key, &event_name(event), rec.state, next, rec.site.as_deref(), now)?;

    match (loc.table, loc.dag) {
        (Table::Job, false) => mirror_main_task(tx, &loc.key)?,
        (Table::Task, _) => drive_job_from_task(tx, loc, rec, next, now)?,
        (Table::Job, true) => drive_tasks_from_job(tx, &loc.key, next, now)?,
    }
    Ok(next)
}

fn mirror_main_task(tx: &Transaction, job: &UnitKey) -> Result<()> {
    tx.execute(
        "UPDATE task SET state = j.state, retries = j.retries, passkey = j.passkey, host = j.host,
             grid_id = j.grid_id, site = j.site, last_update = j.last_update,
             state_entered = j.state_entered, error = j.error
         FROM (SELECT * FROM job WHERE dataset_id = ?1 AND job_index = ?2) AS j
         WHERE task.dataset_id = ?1 AND task.job_index = ?2",
        params![job.dataset_id, job.job_index as i64],
    )?;
    Ok(())
}

fn step(tx: &Transaction, loc: &Loc, event: Event, now: Millis) -> Result<JobState> {
    let rec = load_existing(tx, loc)?;
    apply(tx, loc, &rec, event, now)
}

fn job_loc(key: &UnitKey) -> Loc {
    Loc {
        table: Table::Job,
        key: key.job_key(),
        dag: true,
    }
}

fn task_states(c: &Connection, job: &UnitKey) -> Result<BTreeMap<String, JobState>> {
    let mut st = c.prepare_cached(
        "SELECT task_name, state FROM task WHERE dataset_id = ?1 AND job_index = ?2",
    )?;
    let rows = st.query_map(params![job.dataset_id, job.job_index as i64], |r| {
        Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?))
    })?;
    let mut out = BTreeMap::new();
    for row in rows {
        let (n, s) = row?;
        out.insert(n, parse_state(&s)?);
    }
    Ok(out)
}

/// Moves a graph job forward after one of its tasks changed state.
fn drive_job_from_task(tx: &Transaction, task: &Loc, before: &UnitRecord, next: JobState, now: Millis) -> Result<()> {
    let jl = job_loc(&task.key);
    let job = load_existing(tx, &jl)?;
    match next {
        JobState::Queueing if job.state == JobState::Waiting => {
            let site = load_existing(tx, task)?.site;
            update_unit(tx, &jl, "site = ?4", &[&site])?;
            apply(tx, &jl, &job, Event::EnqueueRequested, now)?;
        }
        JobState::Queued if job.state == JobState::Queueing => {
            apply(tx, &jl, &job, Event::SubmittedToBackend, now)?;
        }
        JobState::Processing => {
            advance_job(tx, &jl, JobState::Processing, now)?;
        }
        JobState::Ok => {
            if task_states(tx, &jl.key)?.values().all(|s| *s == JobState::Ok) {
                advance_job(tx, &jl, JobState::Ok, now)?;
            }
        }
        JobState::Failed if !job.state.is_terminal() && job.state != JobState::Error => {
            let name = task.key.task.as_deref().unwrap_or_default();
            let message = format!(
                "task {name} failed: {}",
                before.error.as_deref().unwrap_or("retries exhausted")
            );
            update_unit(tx, &jl, "error = ?4", &[&message])?;
            apply(tx, &jl, &job, Event::ErrorReported, now)?;
        }
        _ => {}
    }
    Ok(())
}

/// Walks a graph job along the forward path until it reaches `target`.
fn advance_job(tx: &Transaction, jl: &Loc, target: JobState, now: Millis) -> Result<()> {
    const ORDER: [JobState; 5] = [
        JobState::Queueing,
        JobState::Queued,
        JobState::Processing,
        JobState::Copying,
        JobState::Ok,
    ];
    let goal = ORDER.iter().position(|s| *s == target).unwrap_or(0);
    loop {
        let job = load_existing(tx, jl)?;
        let Some(at) = ORDER.iter().position(|s| *s == job.state) else {
            return Ok(());
        };
        if at >= goal {
            return Ok(());
        }
        let event = match job.state {
            JobState::Queueing => Event::SubmittedToBackend,
            JobState::Queued => Event::PilotStarted,
            JobState::Processing => Event::WorkCompleted,
            _ => Event::CopyCompleted,
        };
        apply(tx, jl, &job, event, now)?;
    }
}

/// Propagates a graph job's own transitions to its tasks.
fn drive_tasks_from_job(tx: &Transaction, job: &UnitKey, next: JobState, now: Millis) -> Result<()> {
    match next {
        JobState::Suspended | JobState::Error => {
            for (name, state) in task_states(tx, job)? {
                if matches!(state, JobState::Ok | JobState::Failed | JobState::Suspended) {
                    continue;
                }
                let loc = Loc {
                    table: Table::Task,
                    key: UnitKey::task(job.dataset_id, job.job_index, &name),
                    dag: true,
                };
                step(tx, &loc, Event::OperatorSuspend, now)?;
            }
        }
        JobState::Waiting => {
            // a fresh attempt of the whole graph
            let names: Vec<String> = task_states(tx, job)?.into_keys().collect();
            for name in names {
                let loc = Loc {
                    table: Table::Task,
                    key: UnitKey::task(job.dataset_id, job.job_index, &name),
                    dag: true,
                };
                let rec = load_existing(tx, &loc)?;
                let key = new_passkey();
                update_unit(
                    tx,
                    &loc,
                    "state = 'WAITING', retries = 0, passkey = ?4, host = NULL, grid_id = NULL,
                     site = NULL, error = NULL, state_entered = ?5, last_update = ?5",
                    &[&key, &now],
                )?;
                log_event(tx, &loc.key, "JobRestarted", rec.state, JobState::Waiting, None, now)?;
            }
            tx.execute(
                "DELETE FROM job_statistics WHERE dataset_id = ?1 AND job_index = ?2",
                params![job.dataset_id, job.job_index as i64],
            )?;
            tx.execute(
                "DELETE FROM job_output WHERE dataset_id = ?1 AND job_index = ?2",
                params![job.dataset_id, job.job_index as i64],
            )?;
        }
        _ => {}
    }
    Ok(())
}

fn check_passkey(rec: &UnitRecord, offered: &str) -> Result<()> {
    if passkey_matches(&rec.passkey, offered) {
        Ok(())
    } else {
        Err(DatastoreError::BadPasskey(rec.key.clone()))
    }
}

fn stale(rec: &UnitRecord, expected: JobState) -> DatastoreError {
    DatastoreError::StaleState {
        key: rec.key.clone(),
        expected,
        actual: rec.state,
    }
}

fn store_stats(tx: &Transaction, loc: &Loc, stats: &StatMap) -> Result<()> {
    for (name, value) in stats {
        if name.is_empty() {
            return Err(DatastoreError::EmptyStatName);
        }
        if !value.is_finite() {
            return Err(DatastoreError::NonFiniteValue(name.clone()));
        }
    }
    let task = loc.key.task.clone().unwrap_or_else(|| IMPLICIT_TASK.to_string());
    let mut st = tx.prepare_cached(
        "INSERT INTO job_statistics (dataset_id, job_index, task_name, name, value)
         VALUES (?1, ?2, ?3, ?4, ?5)
         ON CONFLICT(dataset_id, job_index, task_name, name) DO UPDATE SET value = ?5",
    )?;
    for (name, value) in stats {
        st.execute(params![loc.key.dataset_id, loc.key.job_index as i64, task, name, value])?;
    }
    Ok(())
}

fn store_outputs(tx: &Transaction, loc: &Loc, outputs: &[OutputRecord]) -> Result<()> {
    let task = loc.key.task.clone().unwrap_or_else(|| IMPLICIT_TASK.to_string());
    let mut st = tx.prepare_cached(
        "INSERT OR REPLACE INTO job_output (dataset_id, job_index, task_name, name, url, md5, size)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
    )?;
    for o in outputs {
        st.execute(params![
            loc.key.dataset_id,
            loc.key.job_index as i64,
            task,
            o.name,
            o.url,
            o.md5,
            o.size as i64
        ])?;
    }
    Ok(())
}

fn control_one(tx: &Transaction, key: &UnitKey, action: ControlAction, now: Millis) -> Result<JobState> {
    let loc = locate(tx, &key.job_key())?;
    let rec = load_existing(tx, &loc)?;
    let illegal = |event| DatastoreError::IllegalTransition(IllegalTransition { state: rec.state, event });
    match action {
        ControlAction::Suspend => match rec.state {
            JobState::Suspended => Ok(JobState::Suspended),
            _ => apply(tx, &loc, &rec, Event::OperatorSuspend, now),
        },
        ControlAction::Resume => apply(tx, &loc, &rec, Event::OperatorResume, now),
        ControlAction::Reset => match rec.state {
            JobState::Ok => Err(illegal(Event::OperatorReset)),
            JobState::Reset | JobState::Cleaning => Ok(rec.state),
            JobState::Failed => apply(tx, &loc, &rec, Event::OperatorReset, now),
            JobState::Suspended => apply(tx, &loc, &rec, Event::OperatorResume, now),
            _ => {
                apply(tx, &loc, &rec, Event::OperatorSuspend, now)?;
                step(tx, &loc, Event::OperatorResume, now)
            }
        },
    }
}

fn select_records(c: &Connection, sql: &str, args: &[&dyn rusqlite::ToSql]) -> Result<Vec<UnitRecord>> {
    let mut st = c.prepare_cached(sql)?;
    let rows = st.query_map(args, |r| {
        let ds: i64 = r.get(9)?;
        let job: i64 = r.get(10)?;
        let task: Option<String> = r.get(11)?;
        let is_dag: bool = r.get(12)?;
        let key = UnitKey {
            dataset_id: ds,
            job_index: job as u64,
            task,
        };
        let dag_job = is_dag && key.task.is_none();
        row_to_record(r, key, dag_job)
    })?;
    let mut out = Vec::new();
    for row in rows {
        if let Some(rec) = finish(Some(row?))? {
            out.push(rec);
        }
    }
    Ok(out)
}

fn states_list(states: &[JobState]) -> String {
    states
        .iter()
        .map(|s| format!("'{}'", s.as_str()))
        .collect::<Vec<_>>()
        .join(",")
}

const ACTIVE: [JobState; 3] = [JobState::Queueing, JobState::Queued, JobState::Processing];
const OWNED: [JobState; 4] = [
    JobState::Queueing,
    JobState::Queued,
    JobState::Processing,
    JobState::Copying,
];

fn load_dag(c: &Connection, ds: i64, job: u64) -> Result<TaskDag> {
    let mut st = c.prepare_cached(
        "SELECT name, needs_gpu, min_memory_mb, min_disk_mb, max_walltime_s FROM task_def
         WHERE dataset_id = ?1 ORDER BY task_index",
    )?;
    let vertices = st
        .query_map([ds], |r| {
            Ok((
                r.get::<_, String>(0)?,
                ResourceRequirements {
                    needs_gpu: r.get(1)?,
                    min_memory_mb: r.get::<_, i64>(2)? as u64,
                    min_disk_mb: r.get::<_, i64>(3)? as u64,
                    max_walltime_s: r.get::<_, i64>(4)? as u64,
                },
            ))
        })?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    let mut st = c.prepare_cached(
        "SELECT parent, child FROM task_rel WHERE dataset_id = ?1 AND job_index = ?2 ORDER BY rowid",
    )?;
    let edges = st
        .query_map(params![ds, job as i64], |r| Ok((r.get(0)?, r.get(1)?)))?
        .collect::<rusqlite::Result<Vec<_>>>()?;
    Ok(TaskDag { vertices, edges })
}

impl Datastore {
    /// Compare-and-swap: applies `event` only if the unit is in `expected`
    /// and, when given, `passkey` is the unit's active passkey.
    pub fn update_unit_state(
        &self,
        key: &UnitKey,
        expected: JobState,
        event: Event,
        passkey: Option<&str>,
    ) -> Result<JobState> {
        self.write(|tx, now| {
            let loc = locate(tx, key)?;
            let rec = load_existing(tx, &loc)?;
            if let Some(p) = passkey {
                check_passkey(&rec, p)?;
            }
            if rec.state != expected {
                return Err(stale(&rec, expected));
            }
            apply(tx, &loc, &rec, event, now)
        })
    }

    /// Applies a pilot's report after checking its passkey.
    pub fn pilot_report(&self, key: &UnitKey, passkey: &str, report: &PilotReport) -> Result<JobState> {
        self.write(|tx, now| {
            let loc = locate(tx, key)?;
            let rec = load_existing(tx, &loc)?;
            if rec.dag_job {
                // pilots of graph jobs report per task
                return Err(DatastoreError::UnknownJob(key.clone()));
            }
            check_passkey(&rec, passkey)?;
            match report {
                PilotReport::Started { host } => {
                    let state = match rec.state {
                        JobState::Queueing => {
                            apply(tx, &loc, &rec, Event::SubmittedToBackend, now)?;
                            step(tx, &loc, Event::PilotStarted, now)?
                        }
                        JobState::Queued => apply(tx, &loc, &rec, Event::PilotStarted, now)?,
                        _ => return Err(stale(&rec, JobState::Queued)),
                    };
                    update_unit(tx, &loc, "host = ?4", &[host])?;
                    if loc.table == Table::Job {
                        mirror_main_task(tx, &loc.key)?;
                    }
                    Ok(state)
                }
                PilotReport::Keepalive => {
                    if rec.state != JobState::Processing {
                        return Err(stale(&rec, JobState::Processing));
                    }
                    update_unit(tx, &loc, "last_update = ?4", &[&now])?;
                    Ok(rec.state)
                }
                PilotReport::Stats(stats) => {
                    if !matches!(rec.state, JobState::Processing | JobState::Copying) {
                        return Err(stale(&rec, JobState::Processing));
                    }
                    store_stats(tx, &loc, stats)?;
                    update_unit(tx, &loc, "last_update = ?4", &[&now])?;
                    Ok(rec.state)
                }
                PilotReport::Finished { outputs } => {
                    if rec.state != JobState::Processing {
                        return Err(stale(&rec, JobState::Processing));
                    }
                    store_outputs(tx, &loc, outputs)?;
                    let state = apply(tx, &loc, &rec, Event::WorkCompleted, now)?;
                    if outputs.is_empty() {
                        return step(tx, &loc, Event::CopyCompleted, now);
                    }
                    Ok(state)
                }
                PilotReport::Error { message } => {
                    if !rec.state.is_active() {
                        return Err(stale(&rec, JobState::Processing));
                    }
                    update_unit(tx, &loc, "error = ?4", &[message])?;
                    apply(tx, &loc, &rec, Event::ErrorReported, now)
                }
            }
        })
    }

    /// Stores (overwriting) statistics for a unit's current attempt.
    pub fn record_stats(&self, key: &UnitKey, passkey: &str, stats: &StatMap) -> Result<()> {
        self.pilot_report(key, passkey, &PilotReport::Stats(stats.clone())).map(|_| ())
    }

    /// Records the backend handle of a submitted unit.
    pub fn record_submission(&self, key: &UnitKey, grid_id: &str) -> Result<JobState> {
        self.write(|tx, now| {
            let loc = locate(tx, key)?;
            let rec = load_existing(tx, &loc)?;
            if !rec.state.is_active() {
                return Err(stale(&rec, JobState::Queueing));
            }
            update_unit(tx, &loc, "grid_id = ?4", &[&grid_id])?;
            if rec.state == JobState::Queueing {
                return apply(tx, &loc, &rec, Event::SubmittedToBackend, now);
            }
            if loc.table == Table::Job {
                mirror_main_task(tx, &loc.key)?;
            }
            Ok(rec.state)
        })
    }

    /// Marks a unit that its backend refused.
    pub fn submission_failed(&self, key: &UnitKey, message: &str) -> Result<JobState> {
        self.write(|tx, now| {
            let loc = locate(tx, key)?;
            let rec = load_existing(tx, &loc)?;
            if rec.state != JobState::Queueing {
                return Err(stale(&rec, JobState::Queueing));
            }
            update_unit(tx, &loc, "error = ?4", &[&message])?;
            apply(tx, &loc, &rec, Event::ErrorReported, now)
        })
    }

    /// Notes a failure reason without changing state.
    pub fn set_error(&self, key: &UnitKey, message: &str) -> Result<()> {
        self.write(|tx, _| {
            let loc = locate(tx, key)?;
            update_unit(tx, &loc, "error = ?4", &[&message])
        })
    }

    /// Atomically hands up to `limit` ready units to `site`, moving them to
    /// QUEUEING. A graph job is bound to the site that claims its first task.
    pub fn claim_units(&self, site: &str, caps: &SiteCapabilities, limit: usize) -> Result<Vec<Claim>> {
        if limit == 0 {
            return Ok(Vec::new());
        }
        self.write(|tx, now| {
            let mut cands: Vec<(UnitKey, ResourceRequirements)> = Vec::new();
            {
                let mut st = tx.prepare_cached(
                    "SELECT j.dataset_id, j.job_index, t.needs_gpu, t.min_memory_mb, t.min_disk_mb,
                            t.max_walltime_s
                     FROM job j
                     JOIN dataset d ON d.dataset_id = j.dataset_id
                     JOIN task_def t ON t.dataset_id = j.dataset_id
                     WHERE d.is_dag = 0 AND j.state = 'WAITING'
                       AND t.needs_gpu <= ?1 AND t.min_memory_mb <= ?2 AND t.min_disk_mb <= ?3
                       AND t.max_walltime_s <= ?4
                     ORDER BY j.dataset_id, j.job_index LIMIT ?5",
                )?;
                let rows = st.query_map(
                    params![
                        caps.gpu,
                        caps.memory_mb as i64,
                        caps.disk_mb as i64,
                        caps.walltime_s as i64,
                        limit as i64
                    ],
                    |r| {
                        Ok((
                            UnitKey::job(r.get(0)?, r.get::<_, i64>(1)? as u64),
                            ResourceRequirements {
                                needs_gpu: r.get(2)?,
                                min_memory_mb: r.get::<_, i64>(3)? as u64,
                                min_disk_mb: r.get::<_, i64>(4)? as u64,
                                max_walltime_s: r.get::<_, i64>(5)? as u64,
                            },
                        ))
                    },
                )?;
                for row in rows {
                    cands.push(row?);
                }
            }
            let graph_jobs: Vec<(i64, u64, Option<String>)> = tx
                .prepare_cached(
                    "SELECT j.dataset_id, j.job_index, j.site FROM job j
                     JOIN dataset d ON d.dataset_id = j.dataset_id
                     WHERE d.is_dag = 1 AND j.state IN ('WAITING','QUEUEING','QUEUED','PROCESSING')
                       AND (j.site IS NULL OR j.site = ?1)
                     ORDER BY j.dataset_id, j.job_index",
                )?
                .query_map([site], |r| Ok((r.get(0)?, r.get::<_, i64>(1)? as u64, r.get(2)?)))?
                .collect::<rusqlite::Result<_>>()?;
            let mut dags: HashMap<i64, TaskDag> = HashMap::new();
            let mut found = 0;
            for (ds, job, bound) in graph_jobs {
                if found >= limit {
                    break;
                }
                if !dags.contains_key(&ds) {
                    dags.insert(ds, load_dag(tx, ds, job)?);
                }
                let dag = &dags[&ds];
                if bound.is_none() && !match_requirements(&dag.envelope(), caps) {
                    continue;
                }
                let states = task_states(tx, &UnitKey::job(ds, job))?;
                for name in ready_tasks(dag, &states) {
                    let req = *dag.requirements(&name).unwrap_or(&ResourceRequirements::default());
                    if match_requirements(&req, caps) {
                        cands.push((UnitKey::task(ds, job, &name), req));
                        found += 1;
                    }
                }
            }
            cands.sort_by(|a, b| a.0.cmp(&b.0));
            cands.truncate(limit);

            let mut claims = Vec::with_capacity(cands.len());
            for (key, requirements) in cands {
                let loc = locate(tx, &key)?;
                update_unit(tx, &loc, "site = ?4", &[&site])?;
                let rec = load_existing(tx, &loc)?;
                apply(tx, &loc, &rec, Event::EnqueueRequested, now)?;
                claims.push(Claim {
                    key: loc.key,
                    passkey: rec.passkey,
                    requirements,
                });
            }
            Ok(claims)
        })
    }

    /// Operator control of one job (a task key controls its whole job).
    pub fn control(&self, key: &UnitKey, action: ControlAction) -> Result<JobState> {
        self.write(|tx, now| control_one(tx, key, action, now))
    }

    /// Applies `action` to every job of a dataset; jobs for which the
    /// action is illegal are skipped. Returns (changed, skipped).
    pub fn control_dataset(&self, dataset: i64, action: ControlAction) -> Result<(u64, u64)> {
        self.write(|tx, now| {
            let jobs: Vec<i64> = tx
                .prepare("SELECT job_index FROM job WHERE dataset_id = ?1 ORDER BY job_index")?
                .query_map([dataset], |r| r.get(0))?
                .collect::<rusqlite::Result<_>>()?;
            if jobs.is_empty() {
                super::load_dataset(tx, dataset)?;
            }
            let (mut changed, mut skipped) = (0, 0);
            for job in jobs {
                let key = UnitKey::job(dataset, job as u64);
                let before = load_existing(tx, &locate(tx, &key)?)?.state;
                match control_one(tx, &key, action, now) {
                    Ok(after) if after != before => changed += 1,
                    Ok(_) | Err(DatastoreError::IllegalTransition(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((changed, skipped))
        })
    }

    pub fn unit(&self, key: &UnitKey) -> Result<Option<UnitRecord>> {
        self.read(|c| {
            let loc = match locate(c, key) {
                Ok(l) => l,
                Err(DatastoreError::UnknownJob(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            load(c, &loc)
        })
    }

    /// Job rows, monolithic and graph alike, plus the task rows of graph
    /// jobs, restricted to `states`.
    pub fn records_in_states(&self, states: &[JobState]) -> Result<Vec<UnitRecord>> {
        let list = states_list(states);
        self.read(|c| {
            let mut out = select_records(
                c,
                &format!(
                    "SELECT {COLUMNS}, j.dataset_id, j.job_index, NULL, d.is_dag FROM job j
                     JOIN dataset d ON d.dataset_id = j.dataset_id
                     WHERE j.state IN ({list}) ORDER BY j.dataset_id, j.job_index"
                ),
                &[],
            )?;
            out.extend(select_records(
                c,
                &format!(
                    "SELECT {COLUMNS}, t.dataset_id, t.job_index, t.task_name, d.is_dag FROM task t
                     JOIN dataset d ON d.dataset_id = t.dataset_id
                     WHERE d.is_dag = 1 AND t.state IN ({list})
                     ORDER BY t.dataset_id, t.job_index, t.task_name"
                ),
                &[],
            )?);
            Ok(out)
        })
    }

    /// Schedulable units attributed to `site` that may hold a backend entry.
    pub fn owned_units(&self, site: &str) -> Result<Vec<UnitRecord>> {
        let list = states_list(&OWNED);
        self.read(|c| {
            let mut out = select_records(
                c,
                &format!(
                    "SELECT {COLUMNS}, j.dataset_id, j.job_index, NULL, d.is_dag FROM job j
                     JOIN dataset d ON d.dataset_id = j.dataset_id
                     WHERE d.is_dag = 0 AND j.site = ?1 AND j.state IN ({list})
                     ORDER BY j.dataset_id, j.job_index"
                ),
                &[&site],
            )?;
            out.extend(select_records(
                c,
                &format!(
                    "SELECT {COLUMNS}, t.dataset_id, t.job_index, t.task_name, d.is_dag FROM task t
                     JOIN dataset d ON d.dataset_id = t.dataset_id
                     WHERE d.is_dag = 1 AND t.site = ?1 AND t.state IN ({list})
                     ORDER BY t.dataset_id, t.job_index, t.task_name"
                ),
                &[&site],
            )?);
            Ok(out)
        })
    }

    /// Units of `site` that are queued or running on its backend.
    pub fn count_active(&self, site: &str) -> Result<usize> {
        Ok(self
            .owned_units(site)?
            .iter()
            .filter(|u| ACTIVE.contains(&u.state))
            .count())
    }

    pub fn job_records(&self, dataset: i64) -> Result<Vec<JobRecord>> {
        self.read(|c| {
            let recs = select_records(
                c,
                &format!(
                    "SELECT {COLUMNS}, j.dataset_id, j.job_index, NULL, d.is_dag FROM job j
                     JOIN dataset d ON d.dataset_id = j.dataset_id
                     WHERE j.dataset_id = ?1 ORDER BY j.job_index"
                ),
                &[&dataset],
            )?;
            Ok(recs
                .into_iter()
                .map(|u| JobRecord {
                    dataset_id: u.key.dataset_id,
                    job_index: u.key.job_index,
                    state: u.state,
                    retries: u.retries,
                    passkey: u.passkey,
                    host: u.host,
                    grid_id: u.grid_id,
                    site: u.site,
                    last_update: u.last_update,
                    state_entered: u.state_entered,
                })
                .collect())
        })
    }

    pub fn task_records(&self, dataset: i64, job: u64) -> Result<Vec<TaskRecord>> {
        self.read(|c| {
            let recs = select_records(
                c,
                &format!(
                    "SELECT {COLUMNS}, t.dataset_id, t.job_index, t.task_name, 0 FROM task t
                     JOIN task_def td ON td.dataset_id = t.dataset_id AND td.name = t.task_name
                     WHERE t.dataset_id = ?1 AND t.job_index = ?2 ORDER BY td.task_index"
                ),
                &[&dataset, &(job as i64)],
            )?;
            Ok(recs
                .into_iter()
                .map(|u| TaskRecord {
                    dataset_id: u.key.dataset_id,
                    job_index: u.key.job_index,
                    task_name: u.key.task.unwrap_or_default(),
                    state: u.state,
                    retries: u.retries,
                    passkey: u.passkey,
                    host: u.host,
                    grid_id: u.grid_id,
                    site: u.site,
                    last_update: u.last_update,
                    state_entered: u.state_entered,
                })
                .collect())
        })
    }

    /// The task graph of one job.
    pub fn task_dag(&self, dataset: i64, job: u64) -> Result<TaskDag> {
        self.read(|c| load_dag(c, dataset, job))
    }

    /// Declared outputs of a unit's current attempt.
    pub fn outputs(&self, key: &UnitKey) -> Result<Vec<OutputRecord>> {
        self.read(|c| {
            let task = key.task.clone();
            let mut st = c.prepare_cached(
                "SELECT name, url, md5, size FROM job_output
                 WHERE dataset_id = ?1 AND job_index = ?2 AND (?3 IS NULL OR task_name = ?3)
                 ORDER BY task_name, name",
            )?;
            let rows = st.query_map(params![key.dataset_id, key.job_index as i64, task], |r| {
                Ok(OutputRecord {
                    name: r.get(0)?,
                    url: r.get(1)?,
                    md5: r.get(2)?,
                    size: r.get::<_, i64>(3)? as u64,
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }
}
