//! Server-side processes: the RPC monitor, one queue daemon per site,
//! housekeeping and output verification. [`Daemon`] runs them all in one
//! process, each on its own thread.

pub mod dh;
pub mod monitor;
pub mod queue;
pub mod service;
pub mod web;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tracing::error;

use crate::config::Config;
use crate::datastore::{Datastore, DatastoreError};
use crate::gridplugins::PluginError;
use crate::par::Exec;
use crate::rpc::auth::CredentialStore;
use crate::rpc::server::ServerError;
use crate::rpc::{serve, ServerHandle};
use crate::storage::Storage;

pub use dh::{soapdh_cycle, DhSettings, GcReport};
pub use monitor::{housekeeping, HousekeepingReport};
pub use queue::{CycleReport, QueueDaemon};
pub use service::{MonitorService, ServerState};

#[derive(Debug, thiserror::Error)]
pub enum DaemonError {
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Plugin(#[from] PluginError),
    #[error(transparent)]
    Server(#[from] ServerError),
}

/// Sleeps in short slices so a stop request is noticed quickly.
fn pause(stop: &AtomicBool, d: Duration) {
    let until = Instant::now() + d;
    while !stop.load(Ordering::SeqCst) {
        let left = until.saturating_duration_since(Instant::now());
        if left.is_zero() {
            break;
        }
        std::thread::sleep(left.min(Duration::from_millis(50)));
    }
}

fn spawn_loop(
    name: String,
    stop: Arc<AtomicBool>,
    every: Duration,
    mut f: impl FnMut() -> Result<(), DaemonError> + Send + 'static,
) -> JoinHandle<()> {
    std::thread::Builder::new()
        .name(name.clone())
        .spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                if let Err(e) = f() {
                    error!(daemon = %name, error = %e, "cycle failed");
                }
                pause(&stop, every);
            }
        })
        .expect("spawn daemon thread")
}

/// Which parts of the server to run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roles {
    pub rpc: bool,
    /// Site ids; `None` runs every configured site.
    pub sites: Option<Vec<String>>,
    pub housekeeping: bool,
    pub dh: bool,
}

impl Default for Roles {
    fn default() -> Self {
        Roles {
            rpc: true,
            sites: None,
            housekeeping: true,
            dh: true,
        }
    }
}

pub struct Daemon {
    state: Arc<ServerState>,
    server: Option<ServerHandle>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl Daemon {
    pub fn start(config: Config, db: Arc<Datastore>, credentials: CredentialStore, roles: &Roles) -> Result<Self, DaemonError> {
        let state = Arc::new(ServerState::new(db.clone(), config.clone(), credentials));
        Self::start_with(state, roles)
    }

    pub fn start_with(state: Arc<ServerState>, roles: &Roles) -> Result<Self, DaemonError> {
        let config = state.config.clone();
        let db = state.db.clone();
        let stop = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();

        let server = if roles.rpc {
            let svc = MonitorService::new(state.clone());
            Some(serve(&config.server.bind, svc, crate::rpc::server::DEFAULT_WORKERS)?)
        } else {
            None
        };

        for site in &config.sites {
            if roles.sites.as_ref().is_some_and(|ids| !ids.contains(&site.site_id)) {
                continue;
            }
            let monitor_url = match &server {
                Some(s) if config.server.monitor_url.is_empty() => s.url(),
                _ => config.server.monitor_url.clone(),
            };
            let mut q = QueueDaemon::from_config(db.clone(), site.clone(), &monitor_url, &config.server.spool)?
                .with_system(config.system.clone());
            threads.push(spawn_loop(format!("queue-{}", site.site_id), stop.clone(), site.poll_interval, move || {
                q.cycle().map(|_| ())
            }));
        }
        if roles.housekeeping {
            let db = db.clone();
            let policy = config.server.policy.clone();
            threads.push(spawn_loop(
                "housekeeping".into(),
                stop.clone(),
                config.server.housekeeping_interval,
                move || housekeeping(&db, &policy, Exec::default()).map(|_| ()),
            ));
        }
        if roles.dh {
            let db = db.clone();
            let storage = Storage::default();
            let mut roots: Vec<PathBuf> = config.system.get("scratch").map(PathBuf::from).into_iter().collect();
            roots.extend(config.sites.iter().filter_map(|s| s.system_params.get("scratch").map(PathBuf::from)));
            roots.sort();
            roots.dedup();
            let settings = DhSettings {
                spool: config.server.spool.clone(),
                scratch_roots: roots,
                scratch_grace: config.server.policy.timeout(crate::lifecycle::JobState::Processing).unwrap_or(Duration::from_secs(3600)),
            };
            threads.push(spawn_loop("dh".into(), stop.clone(), config.server.dh_interval, move || {
                soapdh_cycle(&db, &storage, &settings, Exec::default()).map(|_| ())
            }));
        }
        Ok(Daemon {
            state,
            server,
            stop,
            threads,
        })
    }

    pub fn state(&self) -> &Arc<ServerState> {
        &self.state
    }

    /// Base URL of the RPC server, if this daemon runs one.
    pub fn url(&self) -> Option<String> {
        self.server.as_ref().map(|s| s.url())
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Blocks until the stop flag is raised, then shuts down.
    pub fn wait(self) {
        while !self.stop.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(200));
        }
        self.shutdown();
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(s) = self.server.take() {
            s.shutdown();
        }
    }
}
