//! Per-site queue daemon: keeps the site's backend in step with the
//! datastore and tops its queue up to `max_queued`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tracing::{debug, info, warn};

use super::DaemonError;
use crate::config::SiteConfig;
use crate::datastore::{Claim, Datastore, DatastoreError, SiteRecord};
use crate::expr::{specialize, EvalContext};
use crate::gridplugins::{create_plugin, BackendStatus, GridPlugin, JobMaterialization};
use crate::lifecycle::{Event, JobState};
use crate::steering::SteeringSpec;

/// What one pass did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleReport {
    pub claimed: usize,
    pub submitted: usize,
    pub submit_failures: usize,
    /// Units whose backend entry disappeared or exited early.
    pub lost: usize,
    pub orphans_removed: usize,
    /// The site is stopped; nothing was claimed.
    pub paused: bool,
}

pub struct QueueDaemon {
    db: Arc<Datastore>,
    site: SiteConfig,
    plugin: Box<dyn GridPlugin>,
    monitor_url: String,
    spool: PathBuf,
    system: BTreeMap<String, String>,
    specs: HashMap<i64, (SteeringSpec, u64)>,
}

/// Ignores compare-and-swap losses: someone else moved the unit first.
fn tolerate_stale<T>(r: Result<T, DatastoreError>) -> Result<Option<T>, DatastoreError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(DatastoreError::StaleState { .. }) | Err(DatastoreError::IllegalTransition(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl QueueDaemon {
    pub fn new(
        db: Arc<Datastore>,
        site: SiteConfig,
        plugin: Box<dyn GridPlugin>,
        monitor_url: &str,
        spool: &Path,
    ) -> Result<Self, DaemonError> {
        // register the site, keeping an operator's stop across restarts
        let enabled = db.site(&site.site_id)?.map_or(true, |s| s.enabled);
        db.upsert_site(&SiteRecord {
            site_id: site.site_id.clone(),
            plugin: site.plugin_name.clone(),
            capabilities: site.capabilities,
            max_queued: site.max_queued as u32,
            enabled,
        })?;
        Ok(QueueDaemon {
            db,
            spool: spool.join(&site.site_id),
            site,
            plugin,
            monitor_url: monitor_url.to_string(),
            system: BTreeMap::new(),
            specs: HashMap::new(),
        })
    }

    /// Builds the site's plugin from its configuration.
    pub fn from_config(db: Arc<Datastore>, site: SiteConfig, monitor_url: &str, spool: &Path) -> Result<Self, DaemonError> {
        let plugin = create_plugin(&site)?;
        Self::new(db, site, plugin, monitor_url, spool)
    }

    /// Values for `$system(...)` during the specialization check.
    pub fn with_system(mut self, system: BTreeMap<String, String>) -> Self {
        self.system = system;
        self.system.extend(self.site.system_params.clone());
        self
    }

    pub fn site(&self) -> &SiteConfig {
        &self.site
    }

    pub fn plugin(&self) -> &dyn GridPlugin {
        self.plugin.as_ref()
    }

    pub fn plugin_mut(&mut self) -> &mut dyn GridPlugin {
        self.plugin.as_mut()
    }

    pub fn cycle(&mut self) -> Result<CycleReport, DaemonError> {
        let mut report = CycleReport::default();
        let site_id = self.site.site_id.clone();
        self.db.touch_site(&site_id)?;

        // 1. reconcile live submissions with the backend
        let owned = self.db.owned_units(&site_id)?;
        let tracked: Vec<_> = owned.iter().filter(|u| u.grid_id.is_some()).collect();
        let handles: Vec<String> = tracked.iter().filter_map(|u| u.grid_id.clone()).collect();
        let status = if handles.is_empty() {
            BTreeMap::new()
        } else {
            self.plugin.check_status(&handles)?
        };
        let mut expected = BTreeSet::new();
        for u in &tracked {
            let h = u.grid_id.clone().unwrap_or_default();
            let st = status.get(&h).copied().unwrap_or(BackendStatus::Vanished);
            let lost = match st {
                BackendStatus::Vanished => u.state != JobState::Copying,
                // a pilot that exits before reporting completion is lost too
                BackendStatus::Finished => matches!(u.state, JobState::Queueing | JobState::Queued | JobState::Processing),
                _ => false,
            };
            if lost {
                if tolerate_stale(self.db.update_unit_state(&u.key, u.state, Event::TimeoutExpired, None))?.is_some() {
                    warn!(key = %u.key, handle = %h, status = ?st, "backend entry lost; unit reset");
                    self.db.set_error(&u.key, &format!("backend reported {st:?} while {}", u.state))?;
                    report.lost += 1;
                }
                self.plugin.remove(&h);
            } else if st != BackendStatus::Finished && st != BackendStatus::Vanished {
                expected.insert(h);
            }
        }
        // 2. drop tagged backend entries nobody accounts for
        let removed = self.plugin.clean_q(&expected);
        if !removed.is_empty() {
            info!(site = %site_id, count = removed.len(), "removed orphaned backend entries");
        }
        report.orphans_removed = removed.len();

        // 3. top up
        let enabled = self.db.site(&site_id)?.map_or(true, |s| s.enabled);
        if !enabled {
            report.paused = true;
            return Ok(report);
        }
        let active = self.db.count_active(&site_id)?;
        let room = self.site.max_queued.saturating_sub(active);
        let claims = self.db.claim_units(&site_id, &self.site.capabilities, room)?;
        report.claimed = claims.len();
        for claim in claims {
            match self.launch(&claim) {
                Ok(true) => report.submitted += 1,
                Ok(false) => {}
                Err(message) => {
                    warn!(key = %claim.key, %message, "submission failed");
                    tolerate_stale(self.db.submission_failed(&claim.key, &message))?;
                    report.submit_failures += 1;
                }
            }
        }
        if report.claimed > 0 {
            debug!(site = %site_id, ?report, "queue cycle");
        }
        Ok(report)
    }

    fn spec(&mut self, dataset: i64) -> Result<&(SteeringSpec, u64), DatastoreError> {
        if !self.specs.contains_key(&dataset) {
            let spec = self.db.steering(dataset)?;
            let total = self.db.job_total(dataset)?;
            self.specs.insert(dataset, (spec, total));
        }
        Ok(&self.specs[&dataset])
    }

    /// Materializes and submits one claim. `Ok(false)` means the unit
    /// moved on while we were submitting.
    fn launch(&mut self, claim: &Claim) -> Result<bool, String> {
        let system = self.system.clone();
        let (spec, total) = self.spec(claim.key.dataset_id).map_err(|e| e.to_string())?;
        // expressions are evaluated by the pilot; catch broken ones here
        let ctx = EvalContext::for_job(claim.key.dataset_id, claim.key.job_index, *total)
            .with_steering(spec)
            .with_system(system);
        specialize(spec, &ctx).map_err(|e| format!("steering does not specialize: {e}"))?;

        let job = JobMaterialization {
            key: claim.key.clone(),
            passkey: claim.passkey.clone(),
            monitor_url: self.monitor_url.clone(),
            requirements: claim.requirements,
            steering_file: None,
        };
        let artifacts = self
            .plugin
            .write_config(&job, &self.site, &self.spool)
            .map_err(|e| e.to_string())?;
        let handle = self.plugin.submit(&artifacts).map_err(|e| e.to_string())?;
        match self.db.record_submission(&claim.key, &handle) {
            Ok(_) => Ok(true),
            Err(DatastoreError::StaleState { .. }) => {
                self.plugin.remove(&handle);
                Ok(false)
            }
            Err(e) => {
                self.plugin.remove(&handle);
                Err(e.to_string())
            }
        }
    }
}
