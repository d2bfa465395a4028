//! Transactional bookkeeping on an embedded SQLite database.
//!
//! Every mutation runs in an immediate (write-locking) transaction, so
//! several daemons may share one database file. Job and task state only
//! changes through [`Datastore::update_unit_state`] and the helpers built on
//! the same compare-and-swap step.

mod stats;
mod units;
mod views;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rusqlite::{params, Connection, OpenFlags, OptionalExtension, Transaction, TransactionBehavior};
use serde::{Deserialize, Serialize};

use crate::dagengine::{DagError, SiteCapabilities};
use crate::lifecycle::{now_ms, IllegalTransition, JobState, Millis, UnitKey};
use crate::rpc::auth::new_passkey;
use crate::steering::{serialize_steering, validate_steering, ParamValue, SteeringSpec, Violation};

pub use stats::{aggregate, StatMap, StatSummary, Summary};
pub use units::{Claim, ControlAction, PilotReport, UnitRecord};
pub use views::{Row, View};

const SCHEMA: &str = include_str!("schema.sql");

#[derive(Debug, thiserror::Error)]
pub enum DatastoreError {
    #[error("steering validation failed: {}", join_violations(.0))]
    ValidationFailed(Vec<Violation>),
    #[error("alias {0:?} is already in use")]
    AliasCollision(String),
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("no dataset {0}")]
    UnknownDataset(i64),
    #[error("no job {0}")]
    UnknownJob(UnitKey),
    #[error("{key} is {actual}, expected {expected}")]
    StaleState {
        key: UnitKey,
        expected: JobState,
        actual: JobState,
    },
    #[error("passkey rejected for {0}")]
    BadPasskey(UnitKey),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error("statistic {0:?} is not a finite number")]
    NonFiniteValue(String),
    #[error("statistic names must not be empty")]
    EmptyStatName,
    #[error("input {0:?} is already mapped to a job")]
    DuplicatePath(String),
    #[error("dataset {0} is not an off-line dataset")]
    DatasetNotGrowable(i64),
    #[error("unknown filter {0:?}")]
    UnknownFilter(String),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("stored data is inconsistent: {0}")]
    Corrupt(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl From<rusqlite::Error> for DatastoreError {
    fn from(e: rusqlite::Error) -> Self {
        DatastoreError::StorageUnavailable(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DatastoreError>;

/// An artifact shipped with every job of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDependency {
    pub name: String,
    pub url: String,
    pub md5: String,
}

/// A declared output, as reported by the pilot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub name: String,
    pub url: String,
    pub md5: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_id: i64,
    pub alias: Option<String>,
    pub description: String,
    pub category: String,
    pub submitter: String,
    pub job_count: u64,
    pub offline: bool,
    pub files_per_job: u32,
    pub is_dag: bool,
    pub created_ms: Millis,
}

/// One input file offered to an off-line dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub size: u64,
    pub run_number: i64,
    pub date: String,
    pub md5: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site_id: String,
    pub plugin: String,
    pub capabilities: SiteCapabilities,
    pub max_queued: u32,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: i64,
    pub ts_ms: Millis,
    pub key: UnitKey,
    pub event: String,
    pub from: JobState,
    pub to: JobState,
    pub site: Option<String>,
}

type Clock = Arc<dyn Fn() -> Millis + Send + Sync>;

pub struct Datastore {
    conn: Mutex<Connection>,
    clock: Clock,
}

impl std::fmt::Debug for Datastore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Datastore").finish_non_exhaustive()
    }
}

pub(crate) fn parse_state(s: &str) -> Result<JobState> {
    s.parse().map_err(|e: crate::lifecycle::UnknownState| DatastoreError::Corrupt(e.to_string()))
}

fn configure(conn: &Connection) -> Result<()> {
    conn.busy_timeout(Duration::from_secs(60))?;
    conn.pragma_update(None, "foreign_keys", "ON")?;
    Ok(())
}

impl Datastore {
    /// Opens (creating if needed) a database file.
    pub fn open(path: &Path) -> Result<Self> {
        let conn = Connection::open(path)?;
        configure(&conn)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self::from_conn(conn))
    }

    /// Opens an existing database without write access, for monitoring.
    pub fn open_read_only(path: &Path) -> Result<Self> {
        let conn = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )?;
        configure(&conn)?;
        Ok(Self::from_conn(conn))
    }

    pub fn in_memory() -> Result<Self> {
        let conn = Connection::open_in_memory()?;
        configure(&conn)?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self::from_conn(conn))
    }

    fn from_conn(conn: Connection) -> Self {
        Datastore {
            conn: Mutex::new(conn),
            clock: Arc::new(now_ms),
        }
    }

    /// Replaces the wall clock, for tests.
    pub fn with_clock(mut self, clock: impl Fn() -> Millis + Send + Sync + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    pub fn now(&self) -> Millis {
        (self.clock)()
    }

    fn write<T>(&self, f: impl FnOnce(&Transaction, Millis) -> Result<T>) -> Result<T> {
        let now = self.now();
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let out = f(&tx, now)?;
        tx.commit()?;
        Ok(out)
    }

    fn read<T>(&self, f: impl FnOnce(&Connection) -> Result<T>) -> Result<T> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        f(&conn)
    }

    /// Stores a validated steering document with its jobs and tasks.
    pub fn create_dataset(
        &self,
        spec: &SteeringSpec,
        submitter: &str,
        deps: &[FileDependency],
    ) -> Result<i64> {
        let violations = validate_steering(spec);
        if !violations.is_empty() {
            return Err(DatastoreError::ValidationFailed(violations));
        }
        let dag = crate::dagengine::build_dag(spec)?;
        let xml = serialize_steering(spec);
        self.write(|tx, now| {
            if let Some(alias) = &spec.meta.alias {
                let taken: Option<i64> = tx
                    .query_row("SELECT dataset_id FROM dataset WHERE alias = ?1", [alias], |r| r.get(0))
                    .optional()?;
                if taken.is_some() {
                    return Err(DatastoreError::AliasCollision(alias.clone()));
                }
            }
            tx.execute(
                "INSERT INTO dataset (alias, description, category, submitter, job_count, offline,
                     files_per_job, is_dag, steering_xml, created_ms)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)",
                params![
                    spec.meta.alias,
                    spec.meta.description,
                    spec.meta.category,
                    submitter,
                    spec.meta.job_count as i64,
                    spec.meta.offline,
                    spec.meta.files_per_job,
                    spec.is_dag(),
                    xml,
                    now
                ],
            )?;
            let id = tx.last_insert_rowid();
            store_spec(tx, id, spec)?;
            for d in deps {
                tx.execute(
                    "INSERT INTO file_dependency (dataset_id, name, url, md5) VALUES (?1, ?2, ?3, ?4)",
                    params![id, d.name, d.url, d.md5],
                )?;
            }
            insert_jobs(tx, id, 0..spec.meta.job_count, &dag, now)?;
            Ok(id)
        })
    }

    pub fn dataset(&self, id: i64) -> Result<DatasetInfo> {
        self.read(|c| load_dataset(c, id))
    }

    pub fn datasets(&self) -> Result<Vec<DatasetInfo>> {
        self.read(|c| {
            let ids: Vec<i64> = c
                .prepare("SELECT dataset_id FROM dataset ORDER BY dataset_id")?
                .query_map([], |r| r.get(0))?
                .collect::<rusqlite::Result<_>>()?;
            ids.into_iter().map(|id| load_dataset(c, id)).collect()
        })
    }

    pub fn dataset_by_alias(&self, alias: &str) -> Result<Option<i64>> {
        self.read(|c| {
            Ok(c.query_row("SELECT dataset_id FROM dataset WHERE alias = ?1", [alias], |r| r.get(0))
                .optional()?)
        })
    }

    /// The steering document exactly as stored.
    pub fn steering_xml(&self, id: i64) -> Result<String> {
        self.read(|c| {
            c.query_row("SELECT steering_xml FROM dataset WHERE dataset_id = ?1", [id], |r| r.get(0))
                .optional()?
                .ok_or(DatastoreError::UnknownDataset(id))
        })
    }

    pub fn steering(&self, id: i64) -> Result<SteeringSpec> {
        let xml = self.steering_xml(id)?;
        crate::steering::parse_steering(&xml).map_err(|e| DatastoreError::Corrupt(e.to_string()))
    }

    pub fn file_dependencies(&self, id: i64) -> Result<Vec<FileDependency>> {
        self.read(|c| {
            let mut st = c.prepare(
                "SELECT name, url, md5 FROM file_dependency WHERE dataset_id = ?1 ORDER BY name",
            )?;
            let rows = st.query_map([id], |r| {
                Ok(FileDependency {
                    name: r.get(0)?,
                    url: r.get(1)?,
                    md5: r.get(2)?,
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }

    /// Job count per state; the counts always sum to the number of jobs.
    pub fn state_counts(&self, id: i64) -> Result<BTreeMap<JobState, u64>> {
        self.read(|c| {
            let mut st = c.prepare("SELECT state, COUNT(*) FROM job WHERE dataset_id = ?1 GROUP BY state")?;
            let rows = st.query_map([id], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?)))?;
            let mut out = BTreeMap::new();
            for row in rows {
                let (s, n) = row?;
                out.insert(parse_state(&s)?, n as u64);
            }
            Ok(out)
        })
    }

    pub fn job_total(&self, id: i64) -> Result<u64> {
        self.read(|c| {
            let n: i64 = c.query_row("SELECT COUNT(*) FROM job WHERE dataset_id = ?1", [id], |r| r.get(0))?;
            Ok(n as u64)
        })
    }

    /// Maps new input files onto new jobs of an off-line dataset.
    pub fn grow_dataset(&self, id: i64, manifest: &[ManifestEntry]) -> Result<Vec<UnitKey>> {
        let info = self.dataset(id)?;
        if !info.offline {
            return Err(DatastoreError::DatasetNotGrowable(id));
        }
        let spec = self.steering(id)?;
        let dag = crate::dagengine::build_dag(&spec)?;
        let group = info.files_per_job.max(1) as usize;
        self.write(|tx, now| {
            let mut seen = std::collections::HashSet::new();
            for m in manifest {
                let mapped: Option<i64> = tx
                    .query_row(
                        "SELECT job_index FROM run WHERE dataset_id = ?1 AND path = ?2",
                        params![id, m.path],
                        |r| r.get(0),
                    )
                    .optional()?;
                if mapped.is_some() || !seen.insert(m.path.as_str()) {
                    return Err(DatastoreError::DuplicatePath(m.path.clone()));
                }
            }
            let first: i64 = tx.query_row(
                "SELECT job_count FROM dataset WHERE dataset_id = ?1",
                [id],
                |r| r.get(0),
            )?;
            let chunks: Vec<&[ManifestEntry]> = manifest.chunks(group).collect();
            let new_count = first as u64 + chunks.len() as u64;
            insert_jobs(tx, id, first as u64..new_count, &dag, now)?;
            let mut keys = Vec::new();
            for (i, chunk) in chunks.iter().enumerate() {
                let job = first as u64 + i as u64;
                for m in *chunk {
                    tx.execute(
                        "INSERT INTO run (dataset_id, job_index, path, size, run_number, run_date, md5)
                         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
                        params![id, job as i64, m.path, m.size as i64, m.run_number, m.date, m.md5],
                    )?;
                }
                keys.push(UnitKey::job(id, job));
            }
            tx.execute(
                "UPDATE dataset SET job_count = ?2 WHERE dataset_id = ?1",
                params![id, new_count as i64],
            )?;
            Ok(keys)
        })
    }

    /// Input files mapped to a job of an off-line dataset.
    pub fn job_inputs(&self, id: i64, job: u64) -> Result<Vec<ManifestEntry>> {
        self.read(|c| {
            let mut st = c.prepare(
                "SELECT path, size, run_number, run_date, md5 FROM run
                 WHERE dataset_id = ?1 AND job_index = ?2 ORDER BY path",
            )?;
            let rows = st.query_map(params![id, job as i64], |r| {
                Ok(ManifestEntry {
                    path: r.get(0)?,
                    size: r.get::<_, i64>(1)? as u64,
                    run_number: r.get(2)?,
                    date: r.get(3)?,
                    md5: r.get(4)?,
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }

    pub fn upsert_site(&self, site: &SiteRecord) -> Result<()> {
        self.write(|tx, _| {
            tx.execute(
                "INSERT INTO site (site_id, plugin, gpu, memory_mb, disk_mb, walltime_s, max_queued, enabled)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)
                 ON CONFLICT(site_id) DO UPDATE SET plugin = ?2, gpu = ?3, memory_mb = ?4,
                     disk_mb = ?5, walltime_s = ?6, max_queued = ?7, enabled = ?8",
                params![
                    site.site_id,
                    site.plugin,
                    site.capabilities.gpu,
                    site.capabilities.memory_mb as i64,
                    site.capabilities.disk_mb as i64,
                    site.capabilities.walltime_s as i64,
                    site.max_queued,
                    site.enabled
                ],
            )?;
            Ok(())
        })
    }

    pub fn remove_site(&self, site_id: &str) -> Result<bool> {
        self.write(|tx, _| Ok(tx.execute("DELETE FROM site WHERE site_id = ?1", [site_id])? > 0))
    }

    pub fn set_site_enabled(&self, site_id: &str, enabled: bool) -> Result<bool> {
        self.write(|tx, _| {
            Ok(tx.execute("UPDATE site SET enabled = ?2 WHERE site_id = ?1", params![site_id, enabled])? > 0)
        })
    }

    pub fn touch_site(&self, site_id: &str) -> Result<()> {
        self.write(|tx, now| {
            tx.execute("UPDATE site SET last_seen = ?2 WHERE site_id = ?1", params![site_id, now])?;
            Ok(())
        })
    }

    pub fn sites(&self) -> Result<Vec<SiteRecord>> {
        self.read(|c| {
            let mut st = c.prepare(
                "SELECT site_id, plugin, gpu, memory_mb, disk_mb, walltime_s, max_queued, enabled
                 FROM site ORDER BY site_id",
            )?;
            let rows = st.query_map([], |r| {
                Ok(SiteRecord {
                    site_id: r.get(0)?,
                    plugin: r.get(1)?,
                    capabilities: SiteCapabilities {
                        gpu: r.get(2)?,
                        memory_mb: r.get::<_, i64>(3)? as u64,
                        disk_mb: r.get::<_, i64>(4)? as u64,
                        walltime_s: r.get::<_, i64>(5)? as u64,
                    },
                    max_queued: r.get(6)?,
                    enabled: r.get(7)?,
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }

    pub fn site(&self, site_id: &str) -> Result<Option<SiteRecord>> {
        Ok(self.sites()?.into_iter().find(|s| s.site_id == site_id))
    }

    /// Adds `delta` to a per-site counter.
    pub fn bump_grid_stat(&self, site: &str, name: &str, delta: f64) -> Result<()> {
        self.write(|tx, _| {
            tx.execute(
                "INSERT INTO grid_statistics (site, name, value) VALUES (?1, ?2, ?3)
                 ON CONFLICT(site, name) DO UPDATE SET value = value + ?3",
                params![site, name, delta],
            )?;
            Ok(())
        })
    }

    pub fn grid_stats(&self, site: &str) -> Result<BTreeMap<String, f64>> {
        self.read(|c| {
            let mut st = c.prepare("SELECT name, value FROM grid_statistics WHERE site = ?1")?;
            let rows = st.query_map([site], |r| Ok((r.get(0)?, r.get(1)?)))?;
            Ok(rows.collect::<rusqlite::Result<_>>()?)
        })
    }

    /// Transition history, oldest first. `None` returns every dataset.
    pub fn event_log(&self, dataset: Option<i64>) -> Result<Vec<LogEntry>> {
        self.read(|c| {
            let mut st = c.prepare(
                "SELECT seq, ts_ms, dataset_id, job_index, task_name, event, from_state, to_state, site
                 FROM event_log WHERE ?1 IS NULL OR dataset_id = ?1 ORDER BY seq",
            )?;
            let rows = st.query_map([dataset], |r| {
                Ok((
                    r.get::<_, i64>(0)?,
                    r.get::<_, i64>(1)?,
                    r.get::<_, i64>(2)?,
                    r.get::<_, i64>(3)?,
                    r.get::<_, Option<String>>(4)?,
                    r.get::<_, String>(5)?,
                    r.get::<_, String>(6)?,
                    r.get::<_, String>(7)?,
                    r.get::<_, Option<String>>(8)?,
                ))
            })?;
            let mut out = Vec::new();
            for row in rows {
                let (seq, ts_ms, ds, job, task, event, from, to, site) = row?;
                out.push(LogEntry {
                    seq,
                    ts_ms,
                    key: UnitKey {
                        dataset_id: ds,
                        job_index: job as u64,
                        task,
                    },
                    event,
                    from: parse_state(&from)?,
                    to: parse_state(&to)?,
                    site,
                });
            }
            Ok(out)
        })
    }
}

fn load_dataset(c: &Connection, id: i64) -> Result<DatasetInfo> {
    c.query_row(
        "SELECT alias, description, category, submitter, job_count, offline, files_per_job, is_dag, created_ms
         FROM dataset WHERE dataset_id = ?1",
        [id],
        |r| {
            Ok(DatasetInfo {
                dataset_id: id,
                alias: r.get(0)?,
                description: r.get(1)?,
                category: r.get(2)?,
                submitter: r.get(3)?,
                job_count: r.get::<_, i64>(4)? as u64,
                offline: r.get(5)?,
                files_per_job: r.get(6)?,
                is_dag: r.get(7)?,
                created_ms: r.get(8)?,
            })
        },
    )
    .optional()?
    .ok_or(DatastoreError::UnknownDataset(id))
}

fn store_spec(tx: &Transaction, id: i64, spec: &SteeringSpec) -> Result<()> {
    for p in &spec.parameters {
        tx.execute(
            "INSERT INTO steering_parameter (dataset_id, name, value) VALUES (?1, ?2, ?3)",
            params![id, p.name, p.value],
        )?;
    }
    for m in &spec.metaprojects {
        tx.execute(
            "INSERT INTO meta_project (dataset_id, name, version) VALUES (?1, ?2, ?3)",
            params![id, m.name, m.version],
        )?;
    }
    for (ti, tray) in spec.trays.iter().enumerate() {
        tx.execute(
            "INSERT INTO tray (dataset_id, tray_index, name, iterations, metaprojects)
             VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                id,
                ti as i64,
                tray.name,
                tray.iterations,
                serde_json::to_string(&tray.metaprojects).unwrap_or_default()
            ],
        )?;
        for (mi, m) in tray.modules.iter().enumerate() {
            tx.execute(
                "INSERT INTO module (dataset_id, tray_index, module_index, name, class_name, metaproject)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![id, ti as i64, mi as i64, m.name, m.class_name, m.metaproject],
            )?;
            let module_id = tx.last_insert_rowid();
            for p in &m.parameters {
                let value = match &p.value {
                    ParamValue::Text(t) => t.clone(),
                    ParamValue::List(items) => serde_json::to_string(items).unwrap_or_default(),
                };
                tx.execute(
                    "INSERT INTO cparameter (module_id, name, type, value) VALUES (?1, ?2, ?3, ?4)",
                    params![module_id, p.name, p.kind.as_str(), value],
                )?;
            }
        }
    }
    for (i, t) in spec.effective_tasks().iter().enumerate() {
        let r = &t.requirements;
        tx.execute(
            "INSERT INTO task_def (dataset_id, name, task_index, trays, needs_gpu, min_memory_mb,
                 min_disk_mb, max_walltime_s)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
            params![
                id,
                t.name,
                i as i64,
                serde_json::to_string(&t.trays).unwrap_or_default(),
                r.needs_gpu,
                r.min_memory_mb as i64,
                r.min_disk_mb as i64,
                r.max_walltime_s as i64
            ],
        )?;
    }
    Ok(())
}

fn insert_jobs(
    tx: &Transaction,
    id: i64,
    jobs: std::ops::Range<u64>,
    dag: &crate::dagengine::TaskDag,
    now: Millis,
) -> Result<()> {
    let mut job_st = tx.prepare_cached(
        "INSERT INTO job (dataset_id, job_index, state, retries, passkey, last_update, state_entered)
         VALUES (?1, ?2, 'WAITING', 0, ?3, ?4, ?4)",
    )?;
    let mut task_st = tx.prepare_cached(
        "INSERT INTO task (dataset_id, job_index, task_name, state, retries, passkey, last_update, state_entered)
         VALUES (?1, ?2, ?3, 'WAITING', 0, ?4, ?5, ?5)",
    )?;
    let mut rel_st = tx.prepare_cached(
        "INSERT INTO task_rel (dataset_id, job_index, parent, child) VALUES (?1, ?2, ?3, ?4)",
    )?;
    for job in jobs {
        let passkey = new_passkey();
        job_st.execute(params![id, job as i64, passkey, now])?;
        for name in dag.names() {
            // a monolithic job's single task shares the job's passkey
            let key = if dag.len() == 1 && dag.edges.is_empty() && !is_dag_name(dag) {
                passkey.clone()
            } else {
                new_passkey()
            };
            task_st.execute(params![id, job as i64, name, key, now])?;
        }
        for (p, c) in &dag.edges {
            rel_st.execute(params![id, job as i64, p, c])?;
        }
    }
    Ok(())
}

fn is_dag_name(dag: &crate::dagengine::TaskDag) -> bool {
    dag.names().any(|n| n != crate::steering::IMPLICIT_TASK)
}
