use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::process::Command;

use super::{
    is_attributed, script, submit_name, Artifacts, BackendHandle, BackendStatus, GridPlugin, JobMaterialization,
    PluginError, Result,
};
use crate::config::SiteConfig;

/// Talks to a batch system through three commands given as site options:
///
/// * `submit_cmd <script>` prints the new id as its last output line;
/// * `status_cmd` lists `<id> <name> <Q|R|C>` lines for every entry;
/// * `remove_cmd <id>` cancels one entry.
pub struct BatchPlugin {
    tag: String,
    submit_cmd: String,
    status_cmd: String,
    remove_cmd: String,
    written: HashSet<String>,
}

struct Entry {
    name: String,
    status: BackendStatus,
}

impl BatchPlugin {
    pub fn from_site(tag: &str, site: &SiteConfig) -> Result<Self> {
        let opt = |k: &str| {
            site.option(k)
                .map(str::to_string)
                .ok_or_else(|| PluginError::MissingOption(k.to_string()))
        };
        Ok(BatchPlugin {
            tag: tag.to_string(),
            submit_cmd: opt("submit_cmd")?,
            status_cmd: opt("status_cmd")?,
            remove_cmd: opt("remove_cmd")?,
            written: HashSet::new(),
        })
    }

    fn run(cmd: &str, args: &[&str]) -> std::result::Result<String, String> {
        let out = Command::new("sh")
            .arg("-c")
            .arg(format!("{cmd} \"$@\""))
            .arg("sh")
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }

    fn listing(&self) -> Result<BTreeMap<String, Entry>> {
        let text = Self::run(&self.status_cmd, &[]).map_err(PluginError::BackendUnavailable)?;
        let mut out = BTreeMap::new();
        for line in text.lines() {
            let mut f = line.split_whitespace();
            let (Some(id), Some(name), Some(st)) = (f.next(), f.next(), f.next()) else { continue };
            let status = match st {
                "Q" | "H" => BackendStatus::Queued,
                "R" => BackendStatus::Running,
                "C" | "E" => BackendStatus::Finished,
                _ => continue,
            };
            out.insert(
                id.to_string(),
                Entry {
                    name: name.to_string(),
                    status,
                },
            );
        }
        Ok(out)
    }
}

impl GridPlugin for BatchPlugin {
    fn name(&self) -> &'static str {
        "batch"
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
        let script = artifacts.script.display().to_string();
        let out = Self::run(&self.submit_cmd, &[&script]).map_err(PluginError::SubmitFailure)?;
        out.lines()
            .rev()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map(str::to_string)
            .ok_or_else(|| PluginError::SubmitFailure("no job id printed".into()))
    }

    fn check_status(&mut self, handles: &[BackendHandle]) -> Result<BTreeMap<BackendHandle, BackendStatus>> {
        let listing = self.listing()?;
        Ok(handles
            .iter()
            .map(|h| (h.clone(), listing.get(h).map_or(BackendStatus::Vanished, |e| e.status)))
            .collect())
    }

    fn remove(&mut self, handle: &str) {
        if let Err(e) = Self::run(&self.remove_cmd, &[handle]) {
            tracing::debug!(handle, error = %e, "remove failed");
        }
    }

    fn clean_q(&mut self, expected: &BTreeSet<BackendHandle>) -> Vec<BackendHandle> {
        let Ok(listing) = self.listing() else { return Vec::new() };
        let orphans: Vec<_> = listing
            .into_iter()
            .filter(|(id, e)| is_attributed(&self.tag, &e.name) && e.status != BackendStatus::Finished && !expected.contains(id))
            .map(|(id, _)| id)
            .collect();
        for id in &orphans {
            self.remove(id);
        }
        orphans
    }
}
