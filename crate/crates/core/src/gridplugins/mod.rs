//! Batch backends. Each site's queue daemon owns one plugin instance.

mod batch;
mod local;
mod mock;
pub mod script;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::config::SiteConfig;
use crate::lifecycle::UnitKey;
use crate::steering::ResourceRequirements;

pub use batch::BatchPlugin;
pub use local::LocalExecutor;
pub use mock::{MockConfig, MockPlugin};

/// Opaque backend identifier for one live submission.
pub type BackendHandle = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BackendStatus {
    Queued,
    Running,
    Finished,
    /// The backend no longer knows the handle.
    Vanished,
}

#[derive(Debug, thiserror::Error)]
pub enum PluginError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no configuration written for {0}")]
    NotConfigured(String),
    #[error("backend refused submission: {0}")]
    SubmitFailure(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("invalid environment variable name {0:?}")]
    BadEnvironment(String),
    #[error("option {0:?} is required")]
    MissingOption(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PluginError + '_ {
    move |source| PluginError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub type Result<T> = std::result::Result<T, PluginError>;

/// What a submission needs to start a pilot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobMaterialization {
    pub key: UnitKey,
    pub passkey: String,
    pub monitor_url: String,
    pub requirements: ResourceRequirements,
    /// Set for unmonitored runs: the pilot reads this steering file and
    /// reports to no server.
    pub steering_file: Option<PathBuf>,
}

/// Files written for one submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub key: UnitKey,
    pub submit_name: String,
    pub script: PathBuf,
}

pub trait GridPlugin: Send {
    fn name(&self) -> &'static str;

    /// Prefix of every submission name this instance creates.
    fn tag(&self) -> &str;

    fn write_config(&mut self, job: &JobMaterialization, site: &SiteConfig, out_dir: &Path) -> Result<Artifacts>;

    fn submit(&mut self, artifacts: &Artifacts) -> Result<BackendHandle>;

    /// Handles missing from the answer are vanished.
    fn check_status(&mut self, handles: &[BackendHandle]) -> Result<BTreeMap<BackendHandle, BackendStatus>>;

    /// Best effort and idempotent.
    fn remove(&mut self, handle: &str);

    /// Removes entries carrying this instance's tag that are not in
    /// `expected`.
    fn clean_q(&mut self, expected: &BTreeSet<BackendHandle>) -> Vec<BackendHandle>;
}

/// Default framework tag for a site.
pub fn site_tag(site: &SiteConfig) -> String {
    site.option("tag")
        .map(str::to_string)
        .unwrap_or_else(|| format!("pk-{}", site.site_id))
}

/// Backend-visible name: `<tag>-<dataset>.<job>[-<task>]`.
pub fn submit_name(tag: &str, key: &UnitKey) -> String {
    match &key.task {
        Some(t) => format!("{tag}-{}.{}-{t}", key.dataset_id, key.job_index),
        None => format!("{tag}-{}.{}", key.dataset_id, key.job_index),
    }
}

pub fn is_attributed(tag: &str, name: &str) -> bool {
    name.strip_prefix(tag).is_some_and(|rest| rest.starts_with('-'))
}

/// Plugin registry keyed by the `plugin` name in the site section.
pub fn create_plugin(site: &SiteConfig) -> Result<Box<dyn GridPlugin>> {
    let tag = site_tag(site);
    Ok(match site.plugin_name.as_str() {
        "local" => Box::new(LocalExecutor::new(&tag)),
        "batch" => Box::new(BatchPlugin::from_site(&tag, site)?),
        "mock" => {
            let cfg = MockConfig::from_site(site)?;
            let inner: Option<Box<dyn GridPlugin>> = match site.option("mock.inner") {
                None | Some("none") => None,
                Some("local") => Some(Box::new(LocalExecutor::new(&tag))),
                Some(other) => return Err(PluginError::UnknownPlugin(other.to_string())),
            };
            Box::new(MockPlugin::new(&tag, cfg, inner))
        }
        other => return Err(PluginError::UnknownPlugin(other.to_string())),
    })
}
