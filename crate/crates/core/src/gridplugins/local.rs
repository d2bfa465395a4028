use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command, Stdio};

use super::{
    io_err, is_attributed, script, submit_name, Artifacts, BackendHandle, BackendStatus, GridPlugin,
    JobMaterialization, PluginError, Result,
};
use crate::config::SiteConfig;

/// Runs each submission as a local `sh` process in its own process group.
/// Handles are `<submit name>@<pid>`.
pub struct LocalExecutor {
    tag: String,
    written: HashSet<String>,
    children: HashMap<BackendHandle, Child>,
}

impl LocalExecutor {
    pub fn new(tag: &str) -> Self {
        LocalExecutor {
            tag: tag.to_string(),
            written: HashSet::new(),
            children: HashMap::new(),
        }
    }

    fn pid_of(handle: &str) -> Option<i32> {
        handle.rsplit_once('@')?.1.parse().ok().filter(|p| *p > 1)
    }

    fn alive(pid: i32) -> bool {
        // SAFETY: signal 0 only checks for existence
        unsafe { libc::kill(pid, 0) == 0 }
    }

    fn kill_group(pid: i32) {
        // SAFETY: the pid is the leader of a group this executor created
        unsafe {
            libc::killpg(pid, libc::SIGKILL);
        }
    }

    /// Number of children not yet reaped.
    pub fn tracked(&self) -> usize {
        self.children.len()
    }
}

impl GridPlugin for LocalExecutor {
    fn name(&self) -> &'static str {
        "local"
    }

    fn tag(&self) -> &str {
        &self.tag
    }

    fn write_config(&mut self, job: &JobMaterialization, site: &SiteConfig, out_dir: &Path) -> Result<Artifacts> {
        let name = submit_name(&self.tag, &job.key);
        let a = script::write(job, site, &name, out_dir)?;
        self.written.insert(name);
        Ok(a)
    }

    fn submit(&mut self, artifacts: &Artifacts) -> Result<BackendHandle> {
        if !self.written.remove(&artifacts.submit_name) {
            return Err(PluginError::NotConfigured(artifacts.submit_name.clone()));
        }
        let dir = artifacts.script.parent().unwrap_or(Path::new("."));
        let log = |ext: &str| {
            let p = dir.join(format!("{}.{ext}", artifacts.submit_name));
            fs::File::create(&p).map_err(io_err(&p))
        };
        let child = Command::new("sh")
            .arg(&artifacts.script)
            .stdin(Stdio::null())
            .stdout(log("out")?)
            .stderr(log("err")?)
            .process_group(0)
            .spawn()
            .map_err(|e| PluginError::SubmitFailure(e.to_string()))?;
        let handle = format!("{}@{}", artifacts.submit_name, child.id());
        tracing::debug!(%handle, "spawned pilot");
        self.children.insert(handle.clone(), child);
        Ok(handle)
    }

    fn check_status(&mut self, handles: &[BackendHandle]) -> Result<BTreeMap<BackendHandle, BackendStatus>> {
        let mut out = BTreeMap::new();
        for h in handles {
            let status = match self.children.get_mut(h) {
                Some(child) => match child.try_wait() {
                    Ok(Some(_)) => BackendStatus::Finished,
                    Ok(None) => BackendStatus::Running,
                    Err(e) => return Err(PluginError::BackendUnavailable(e.to_string())),
                },
                // not spawned by this process, e.g. before a restart
                None => match Self::pid_of(h) {
                    Some(pid) if is_attributed(&self.tag, h) && Self::alive(pid) => BackendStatus::Running,
                    _ => BackendStatus::Vanished,
                },
            };
            out.insert(h.clone(), status);
        }
        Ok(out)
    }

    fn remove(&mut self, handle: &str) {
        if let Some(mut child) = self.children.remove(handle) {
            if matches!(child.try_wait(), Ok(None)) {
                Self::kill_group(child.id() as i32);
            }
            let _ = child.wait();
        } else if let Some(pid) = Self::pid_of(handle).filter(|_| is_attributed(&self.tag, handle)) {
            if Self::alive(pid) {
                Self::kill_group(pid);
            }
        }
    }

    fn clean_q(&mut self, expected: &BTreeSet<BackendHandle>) -> Vec<BackendHandle> {
        let orphans: Vec<BackendHandle> = self
            .children
            .keys()
            .filter(|h| is_attributed(&self.tag, h) && !expected.contains(*h))
            .cloned()
            .collect();
        let mut removed = Vec::new();
        for h in orphans {
            let running = self.children.get_mut(&h).is_some_and(|c| matches!(c.try_wait(), Ok(None)));
            self.remove(&h);
            if running {
                removed.push(h);
            }
        }
        removed
    }
}

impl Drop for LocalExecutor {
    fn drop(&mut self) {
        // reap finished children; running pilots are left alone
        for c in self.children.values_mut() {
            let _ = c.try_wait();
        }
    }
}
