//! The worker-side agent. It announces itself to the monitor, fetches the
//! steering and software, runs its trays in a private scratch directory,
//! and reports statistics and outputs back.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tracing::{info, warn};

use crate::daemons::dh::scratch_dir_name;
use crate::datastore::{OutputRecord, StatMap};
use crate::digest::md5_file;
use crate::expr::{specialize, EvalContext, ExprError};
use crate::lifecycle::UnitKey;
use crate::rpc::{method, record, Client, ClientError, Value};
use crate::steering::{parse_steering, SteeringError, IMPLICIT_TASK};
use crate::storage::{Storage, StorageError};
use crate::taskmodules::{execute, ModuleContext, ModuleError};

pub const DEFAULT_KEEPALIVE: Duration = Duration::from_secs(300);

#[derive(Debug, thiserror::Error)]
pub enum PilotError {
    #[error(transparent)]
    Rpc(#[from] ClientError),
    #[error("malformed server reply: {0}")]
    Reply(String),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Module(#[from] ModuleError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{url}: digest {actual}, expected {expected}")]
    DigestMismatch { url: String, expected: String, actual: String },
    #[error("no task {0:?} in the steering")]
    UnknownTask(String),
    #[error("the server withdrew this job: {0}")]
    Withdrawn(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PilotError + '_ {
    move |source| PilotError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub type Result<T> = std::result::Result<T, PilotError>;

/// `<os>-<arch>` for the platforms bundles are built for, else "generic".
pub fn detect_platform() -> String {
    match (std::env::consts::OS, std::env::consts::ARCH) {
        ("linux", "x86_64") => "linux-x86_64".into(),
        ("macos", "aarch64") => "darwin-aarch64".into(),
        _ => "generic".into(),
    }
}

/// Downloads `url` into `cache` unless a copy with digest `md5` is
/// already there. The copy is named by its digest.
pub fn fetch_software(storage: &Storage, url: &str, md5: &str, cache: &Path) -> Result<PathBuf> {
    let md5 = md5.to_ascii_lowercase();
    fs::create_dir_all(cache).map_err(io_err(cache))?;
    let dst = cache.join(&md5);
    if dst.is_file() && md5_file(&dst).map_err(io_err(&dst))? == md5 {
        return Ok(dst);
    }
    let tmp = cache.join(format!("{md5}.part{}", std::process::id()));
    storage.get(url, &tmp)?;
    let actual = md5_file(&tmp).map_err(io_err(&tmp))?;
    if actual != md5 {
        let _ = fs::remove_file(&tmp);
        return Err(PilotError::DigestMismatch {
            url: url.to_string(),
            expected: md5,
            actual,
        });
    }
    fs::rename(&tmp, &dst).map_err(io_err(&dst))?;
    Ok(dst)
}

/// Calls the monitor, retrying transport failures with exponential
/// backoff. Faults are answers and are not retried.
#[derive(Clone)]
pub struct Reporter {
    client: Client,
    retries: u32,
    backoff: Duration,
}

impl Reporter {
    pub fn new(client: Client) -> Self {
        Reporter {
            client,
            retries: 3,
            backoff: Duration::from_secs(1),
        }
    }

    pub fn with_backoff(mut self, retries: u32, first: Duration) -> Self {
        self.retries = retries;
        self.backoff = first;
        self
    }

    pub fn call(&self, method: &str, params: &[Value]) -> std::result::Result<Value, ClientError> {
        let mut attempt = 0;
        loop {
            match self.client.call(method, params) {
                Err(ClientError::Transport { .. }) if attempt < self.retries => {
                    let wait = self.backoff * 2u32.pow(attempt);
                    warn!(method, attempt, ?wait, "monitor unreachable, retrying");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PilotOptions {
    pub dataset: i64,
    pub job: u64,
    pub task: Option<String>,
    pub passkey: Option<String>,
    pub monitor: Option<String>,
    /// Run from a local steering file without reporting anywhere.
    pub steering_file: Option<PathBuf>,
    pub scratch_root: PathBuf,
    pub cache: PathBuf,
    pub keepalive: Duration,
    pub host: String,
    pub retry_backoff: Duration,
}

impl PilotOptions {
    pub fn new(dataset: i64, job: u64) -> Self {
        let tmp = std::env::temp_dir();
        PilotOptions {
            dataset,
            job,
            task: None,
            passkey: None,
            monitor: None,
            steering_file: None,
            scratch_root: tmp.clone(),
            cache: tmp.join("prodkit-cache"),
            keepalive: DEFAULT_KEEPALIVE,
            host: hostname(),
            retry_backoff: Duration::from_secs(1),
        }
    }

    pub fn key(&self) -> UnitKey {
        UnitKey {
            dataset_id: self.dataset,
            job_index: self.job,
            task: self.task.clone(),
        }
    }
}

pub fn hostname() -> String {
    let mut buf = [0u8; 256];
    // SAFETY: gethostname writes at most buf.len() bytes
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc != 0 {
        return "unknown".into();
    }
    let end = buf.iter().position(|b| *b == 0).unwrap_or(buf.len());
    String::from_utf8_lossy(&buf[..end]).into_owned()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub stats: StatMap,
    pub outputs: Vec<OutputRecord>,
}

/// What the monitor hands a pilot before it starts.
#[derive(Debug, Clone, Default)]
struct Assignment {
    steering: String,
    job_count: u64,
    system: BTreeMap<String, String>,
    dependencies: Vec<(String, String, String)>,
    registry: BTreeMap<String, String>,
}

fn reply_str(v: &Value, field: &str) -> Result<String> {
    v.get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| PilotError::Reply(format!("missing {field}")))
}

fn parse_assignment(v: &Value) -> Result<Assignment> {
    let strings = |field: &str| -> BTreeMap<String, String> {
        v.get(field)
            .and_then(Value::as_struct)
            .map(|m| {
                m.iter()
                    .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
                    .collect()
            })
            .unwrap_or_default()
    };
    let mut registry = strings("registry");
    for input in v.get("inputs").and_then(Value::as_array).unwrap_or(&[]) {
        if let (Ok(p), Ok(m)) = (reply_str(input, "path"), reply_str(input, "md5")) {
            registry.insert(p, m);
        }
    }
    let dependencies = v
        .get("dependencies")
        .and_then(Value::as_array)
        .unwrap_or(&[])
        .iter()
        .map(|d| Ok((reply_str(d, "name")?, reply_str(d, "url")?, reply_str(d, "md5")?)))
        .collect::<Result<_>>()?;
    Ok(Assignment {
        steering: reply_str(v, "steering")?,
        job_count: v
            .get("job_count")
            .and_then(Value::as_i64)
            .ok_or_else(|| PilotError::Reply("missing job_count".into()))? as u64,
        system: strings("system"),
        dependencies,
        registry,
    })
}

/// Removes the scratch directory however the run ends.
struct ScratchGuard(PathBuf);

impl Drop for ScratchGuard {
    fn drop(&mut self) {
        if let Err(e) = fs::remove_dir_all(&self.0) {
            if e.kind() != std::io::ErrorKind::NotFound {
                warn!(path = %self.0.display(), error = %e, "scratch not removed");
            }
        }
    }
}

struct Keepalive {
    stop: mpsc::Sender<()>,
    thread: JoinHandle<()>,
}

impl Keepalive {
    fn start(reporter: Reporter, key: String, every: Duration, withdrawn: Arc<AtomicBool>) -> Self {
        let (stop, rx) = mpsc::channel();
        let thread = std::thread::spawn(move || {
            while let Err(mpsc::RecvTimeoutError::Timeout) = rx.recv_timeout(every) {
                match reporter.call(method::KEEPALIVE, &[key.clone().into()]) {
                    Ok(_) => {}
                    Err(ClientError::Fault(f)) => {
                        warn!(fault = %f, "keepalive refused; stopping");
                        withdrawn.store(true, Ordering::SeqCst);
                        return;
                    }
                    Err(e) => warn!(error = %e, "keepalive failed"),
                }
            }
        });
        Keepalive { stop, thread }
    }

    fn finish(self) {
        let _ = self.stop.send(());
        let _ = self.thread.join();
    }
}

pub struct Pilot {
    opts: PilotOptions,
    storage: Storage,
    reporter: Option<Reporter>,
    abort: Arc<AtomicBool>,
}

impl Pilot {
    pub fn new(opts: PilotOptions) -> Self {
        let reporter = match (&opts.monitor, &opts.passkey, &opts.steering_file) {
            (Some(url), Some(key), None) => Some(
                Reporter::new(Client::new(url).with_passkey(key)).with_backoff(3, opts.retry_backoff),
            ),
            _ => None,
        };
        Pilot {
            opts,
            storage: Storage::default(),
            reporter,
            abort: Arc::new(AtomicBool::new(false)),
        }
    }

    /// A flag that stops the run before its next module when raised.
    pub fn abort_flag(&self) -> Arc<AtomicBool> {
        self.abort.clone()
    }

    /// Runs the job. In monitored mode failures after the start report are
    /// sent to the monitor before being returned.
    pub fn run(&self) -> Result<RunSummary> {
        let key = self.opts.key();
        let Some(reporter) = &self.reporter else {
            return self.run_unmonitored();
        };
        let ks = key.to_string();
        reporter.call(method::JOB_STARTED, &[ks.clone().into(), self.opts.host.clone().into()])?;
        info!(key = %ks, host = %self.opts.host, "started");
        let outcome = self.run_monitored(reporter, &ks);
        if let Err(e) = &outcome {
            if !matches!(e, PilotError::Withdrawn(_)) {
                let msg = e.to_string();
                if let Err(re) = reporter.call(method::JOB_ERROR, &[ks.clone().into(), msg.into()]) {
                    warn!(error = %re, "could not report failure");
                }
            }
        }
        outcome
    }

    fn run_monitored(&self, reporter: &Reporter, ks: &str) -> Result<RunSummary> {
        let reply = reporter.call(method::GET_STEERING, &[ks.into()])?;
        let assignment = parse_assignment(&reply)?;
        let passkey = self.opts.passkey.as_deref().unwrap_or_default();
        let withdrawn = self.abort.clone();
        let keepalive = Keepalive::start(reporter.clone(), ks.to_string(), self.opts.keepalive, withdrawn.clone());
        let result = self.execute(&assignment, &scratch_dir_name(passkey), Some(reporter), &withdrawn);
        keepalive.finish();
        let summary = result?;
        if withdrawn.load(Ordering::SeqCst) {
            return Err(PilotError::Withdrawn("keepalive refused".into()));
        }
        let stats: BTreeMap<String, Value> = summary.stats.iter().map(|(k, v)| (k.clone(), Value::Float(*v))).collect();
        reporter.call(method::JOB_STATS, &[ks.into(), Value::Struct(stats)])?;
        let outputs: Vec<Value> = summary
            .outputs
            .iter()
            .map(|o| {
                record([
                    ("name", o.name.as_str().into()),
                    ("url", o.url.as_str().into()),
                    ("md5", o.md5.as_str().into()),
                    ("size", o.size.into()),
                ])
            })
            .collect();
        let state = reporter.call(method::JOB_FINISHED, &[ks.into(), Value::Array(outputs)])?;
        info!(key = %ks, state = ?state.as_str(), outputs = summary.outputs.len(), "finished");
        Ok(summary)
    }

    fn run_unmonitored(&self) -> Result<RunSummary> {
        let path = self
            .opts
            .steering_file
            .as_ref()
            .ok_or_else(|| PilotError::Reply("either a monitor and key or a steering file is needed".into()))?;
        let xml = fs::read_to_string(path).map_err(io_err(path))?;
        let spec = parse_steering(&xml)?;
        let a = Assignment {
            job_count: spec.meta.job_count,
            steering: xml,
            ..Assignment::default()
        };
        self.execute(&a, &format!("pk-u{}", std::process::id()), None, &self.abort)
    }

    fn execute(
        &self,
        a: &Assignment,
        scratch_name: &str,
        reporter: Option<&Reporter>,
        withdrawn: &AtomicBool,
    ) -> Result<RunSummary> {
        let started = Instant::now();
        let spec = parse_steering(&a.steering)?;
        let scratch = self.opts.scratch_root.join(scratch_name);
        fs::create_dir_all(&scratch).map_err(io_err(&scratch))?;
        let _guard = ScratchGuard(scratch.clone());

        let mut ctx = ModuleContext::new(&scratch);
        ctx.storage = self.storage.clone();
        ctx.storage_base = a.system.get("storage").cloned();
        ctx.registry = a.registry.clone();
        ctx.env.insert("PK_DATASET".into(), self.opts.dataset.to_string());
        ctx.env.insert("PK_JOB".into(), self.opts.job.to_string());
        if let Some(t) = &self.opts.task {
            ctx.env.insert("PK_TASK".into(), t.clone());
        }

        if let (Some(r), false) = (reporter, spec.metaprojects.is_empty()) {
            let platform = detect_platform();
            let b = r.call(method::GET_PLATFORM_BUNDLE_URL, &[platform.as_str().into()])?;
            let archive = fetch_software(&self.storage, &reply_str(&b, "url")?, &reply_str(&b, "md5")?, &self.opts.cache)?;
            let dest = scratch.join("software");
            let f = fs::File::open(&archive).map_err(io_err(&archive))?;
            tar::Archive::new(f).unpack(&dest).map_err(io_err(&dest))?;
            ctx.env.insert("PK_SOFTWARE".into(), dest.display().to_string());
        }
        for (name, url, md5) in &a.dependencies {
            let local = fetch_software(&self.storage, url, md5, &self.opts.cache)?;
            ctx.externals.insert(name.clone(), local);
        }

        let eval = EvalContext::for_job(self.opts.dataset, self.opts.job, a.job_count)
            .with_steering(&spec)
            .with_system(a.system.clone());
        let spec = specialize(&spec, &eval)?;
        let task_name = self.opts.task.as_deref().unwrap_or(IMPLICIT_TASK);
        let task = spec.task(task_name).ok_or_else(|| PilotError::UnknownTask(task_name.to_string()))?;

        let mut stats = StatMap::new();
        for tray_name in &task.trays {
            let tray = spec.tray(tray_name).ok_or_else(|| PilotError::UnknownTask(tray_name.clone()))?;
            for _ in 0..tray.iterations.max(1) {
                for m in &tray.modules {
                    if withdrawn.load(Ordering::SeqCst) {
                        return Err(PilotError::Withdrawn(format!("stopped before {}", m.name)));
                    }
                    execute(m, &mut ctx, &mut stats)?;
                }
            }
        }
        stats.insert("pilot.wall_s".into(), started.elapsed().as_secs_f64());
        Ok(RunSummary {
            stats,
            outputs: std::mem::take(&mut ctx.outputs),
        })
    }
}
