use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    is_attributed, script, submit_name, Artifacts, BackendHandle, BackendStatus, GridPlugin, JobMaterialization,
    PluginError, Result,
};
use crate::config::SiteConfig;

/// Fault injection settings. Random decisions depend only on the seed,
/// the submission name and how often that name was submitted, so a run
/// is reproducible whatever order jobs are claimed in.
#[derive(Debug, Clone, PartialEq)]
pub struct MockConfig {
    pub seed: u64,
    pub submit_failure_rate: f64,
    /// Fraction of started submissions killed after `kill_after`.
    pub kill_rate: f64,
    pub kill_after: Duration,
    /// The first `n` submissions fail regardless of the rates.
    pub fail_first_submits: usize,
    /// Simulated timeline when there is no inner backend.
    pub queue_time: Duration,
    pub run_time: Duration,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 0,
            submit_failure_rate: 0.0,
            kill_rate: 0.0,
            kill_after: Duration::from_millis(500),
            fail_first_submits: 0,
            queue_time: Duration::ZERO,
            run_time: Duration::from_secs(1),
        }
    }
}

impl MockConfig {
    pub fn from_site(site: &SiteConfig) -> Result<Self> {
        let mut c = MockConfig::default();
        let num = |k: &str| -> Result<Option<f64>> {
            site.option(k)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| PluginError::MissingOption(format!("{k} (number)")))
                })
                .transpose()
        };
        if let Some(v) = num("mock.seed")? {
            c.seed = v as u64;
        }
        if let Some(v) = num("mock.submit_failure_rate")? {
            c.submit_failure_rate = v;
        }
        if let Some(v) = num("mock.kill_rate")? {
            c.kill_rate = v;
        }
        if let Some(v) = num("mock.kill_after_s")? {
            c.kill_after = Duration::from_secs_f64(v.max(0.0));
        }
        if let Some(v) = num("mock.fail_first_submits")? {
            c.fail_first_submits = v as usize;
        }
        if let Some(v) = num("mock.queue_time_s")? {
            c.queue_time = Duration::from_secs_f64(v.max(0.0));
        }
        if let Some(v) = num("mock.run_time_s")? {
            c.run_time = Duration::from_secs_f64(v.max(0.0));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    submitted: Instant,
    doomed: bool,
    foreign: bool,
}

/// A scriptable backend for fault injection. With an inner plugin it
/// forwards everything and adds failures; without one it simulates a
/// queue where entries are queued, run, then finish.
pub struct MockPlugin {
    tag: String,
    cfg: MockConfig,
    inner: Option<Box<dyn GridPlugin>>,
    written: HashSet<String>,
    attempts: HashMap<String, u64>,
    entries: BTreeMap<BackendHandle, Entry>,
    submits: usize,
    next_id: u64,
    /// Counts of injected faults.
    pub failed_submits: usize,
    pub kills: usize,
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl MockPlugin {
    pub fn new(tag: &str, cfg: MockConfig, inner: Option<Box<dyn GridPlugin>>) -> Self {
        MockPlugin {
            tag: tag.to_string(),
            cfg,
            inner,
            written: HashSet::new(),
            attempts: HashMap::new(),
            entries: BTreeMap::new(),
            submits: 0,
            next_id: 1,
            failed_submits: 0,
            kills: 0,
        }
    }

    fn draw(&self, name: &str, attempt: u64, purpose: u64) -> f64 {
        let seed = self.cfg.seed ^ fnv(name).rotate_left(17) ^ attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ purpose;
        ChaCha8Rng::seed_from_u64(seed).gen::<f64>()
    }

    /// Adds a backend entry not created by this framework.
    pub fn inject_foreign(&mut self, name: &str) -> BackendHandle {
        let h = format!("mock-{}", self.next_id);
        self.next_id += 1;
        self.entries.insert(
            h.clone(),
            Entry {
                name: name.to_string(),
                submitted: Instant::now(),
                doomed: false,
                foreign: true,
            },
        );
        h
    }

    /// Every live backend entry.
    pub fn backend_handles(&self) -> BTreeSet<BackendHandle> {
        self.entries.keys().cloned().collect()
    }

    fn simulated(&self, e: &Entry) -> BackendStatus {
        let age = e.submitted.elapsed();
        if e.foreign || age < self.cfg.queue_time {
            BackendStatus::Queued
        } else if age < self.cfg.queue_time + self.cfg.run_time {
            BackendStatus::Running
        } else {
            BackendStatus::Finished
        }
    }
}

impl GridPlugin for MockPlugin {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn tag(&self) -> &str {
        &self.tag
    }

    fn write_config(&mut self, job: &JobMaterialization, site: &SiteConfig, out_dir: &Path) -> Result<Artifacts> {
        let a = match &mut self.inner {
            Some(inner) => inner.write_config(job, site, out_dir)?,
            None => script::write(job, site, &submit_name(&self.tag, &job.key), out_dir)?,
        };
        self.written.insert(a.submit_name.clone());
        Ok(a)
    }

    fn submit(&mut self, artifacts: &Artifacts) -> Result<BackendHandle> {
        if !self.written.remove(&artifacts.submit_name) {
            return Err(PluginError::NotConfigured(artifacts.submit_name.clone()));
        }
        let name = artifacts.submit_name.clone();
        let attempt = {
            let n = self.attempts.entry(name.clone()).or_insert(0);
            *n += 1;
            *n
        };
        self.submits += 1;
        if self.submits <= self.cfg.fail_first_submits || self.draw(&name, attempt, 1) < self.cfg.submit_failure_rate {
            self.failed_submits += 1;
            return Err(PluginError::SubmitFailure(format!("injected failure for {name}")));
        }
        let handle = match &mut self.inner {
            Some(inner) => inner.submit(artifacts)?,
            None => {
                let h = format!("{name}@mock-{}", self.next_id);
                self.next_id += 1;
                h
            }
        };
        let doomed = self.draw(&name, attempt, 2) < self.cfg.kill_rate;
        self.entries.insert(
            handle.clone(),
            Entry {
                name,
                submitted: Instant::now(),
                doomed,
                foreign: false,
            },
        );
        Ok(handle)
    }

    fn check_status(&mut self, handles: &[BackendHandle]) -> Result<BTreeMap<BackendHandle, BackendStatus>> {
        let due: Vec<BackendHandle> = self
            .entries
            .iter()
            .filter(|(_, e)| e.doomed && e.submitted.elapsed() >= self.cfg.kill_after)
            .map(|(h, _)| h.clone())
            .collect();
        for h in due {
            tracing::debug!(handle = %h, "injected kill");
            self.kills += 1;
            if let Some(inner) = &mut self.inner {
                inner.remove(&h);
            }
            self.entries.remove(&h);
        }
        match &mut self.inner {
            Some(inner) => {
                let mut st = inner.check_status(handles)?;
                for (h, s) in st.iter_mut() {
                    if !self.entries.contains_key(h) {
                        *s = BackendStatus::Vanished;
                    }
                }
                Ok(st)
            }
            None => Ok(handles
                .iter()
                .map(|h| {
                    let s = self.entries.get(h).map_or(BackendStatus::Vanished, |e| self.simulated(e));
                    (h.clone(), s)
                })
                .collect()),
        }
    }

    fn remove(&mut self, handle: &str) {
        if self.entries.remove(handle).is_some() {
            if let Some(inner) = &mut self.inner {
                inner.remove(handle);
            }
        }
    }

    fn clean_q(&mut self, expected: &BTreeSet<BackendHandle>) -> Vec<BackendHandle> {
        let orphans: Vec<BackendHandle> = self
            .entries
            .iter()
            .filter(|(h, e)| !e.foreign && is_attributed(&self.tag, &e.name) && !expected.contains(*h))
            .map(|(h, _)| h.clone())
            .collect();
        for h in &orphans {
            self.remove(h);
        }
        orphans
    }
}
