//! INI configuration shared by the daemons.
//!
//! ```ini
//! [server]
//! bind = 127.0.0.1:8470
//! database = /var/lib/prodkit/store.db
//! credentials = /etc/prodkit/users
//! monitor_url = http://head.example:8470
//! timeout.PROCESSING = 3600
//! max_retries = 5
//!
//! [queue]            ; defaults for every site
//! poll_interval_s = 30
//!
//! [system]           ; $system(...) values and pilot paths
//! storage = file:///data/prodkit
//!
//! [environment]      ; exported into every submission script
//! OMP_NUM_THREADS = 1
//!
//! [site:cluster-a]
//! plugin = local
//! max_queued = 10
//! gpu = true
//! env.CUDA_VISIBLE_DEVICES = 0
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::dagengine::SiteCapabilities;
use crate::lifecycle::{JobState, TimeoutPolicy};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("[{section}] {key}: {message}")]
    BadValue {
        section: String,
        key: String,
        message: String,
    },
    #[error("[{0}]: missing key {1:?}")]
    Missing(String, String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SiteConfig {
    pub site_id: String,
    pub plugin_name: String,
    pub max_queued: usize,
    pub poll_interval: Duration,
    pub capabilities: SiteCapabilities,
    /// Plugin options such as `queue`, `submit_cmd`.
    pub queueing_options: BTreeMap<String, String>,
    pub system_params: BTreeMap<String, String>,
    pub job_env: BTreeMap<String, String>,
}

impl SiteConfig {
    pub fn new(site_id: &str, plugin_name: &str, max_queued: usize) -> Self {
        SiteConfig {
            site_id: site_id.to_string(),
            plugin_name: plugin_name.to_string(),
            max_queued: max_queued.max(1),
            poll_interval: Duration::from_secs(30),
            capabilities: SiteCapabilities::default(),
            queueing_options: BTreeMap::new(),
            system_params: BTreeMap::new(),
            job_env: BTreeMap::new(),
        }
    }

    pub fn option(&self, key: &str) -> Option<&str> {
        self.queueing_options.get(key).map(String::as_str)
    }
}

/// A platform software bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub url: String,
    pub md5: String,
}

#[derive(Debug, Clone)]
pub struct ServerSettings {
    pub bind: String,
    pub database: PathBuf,
    pub credentials: Option<PathBuf>,
    pub monitor_url: String,
    pub policy: TimeoutPolicy,
    pub housekeeping_interval: Duration,
    pub dh_interval: Duration,
    pub module_cache: Option<PathBuf>,
    pub session_ttl: Duration,
    /// Where queue daemons write submission scripts, one directory per site.
    pub spool: PathBuf,
    /// Site whose plugin runs unmonitored submissions.
    pub unmonitored_site: Option<String>,
    /// Accept `file:` URLs for external modules.
    pub allow_file_modules: bool,
}

impl Default for ServerSettings {
    fn default() -> Self {
        ServerSettings {
            bind: "127.0.0.1:8470".into(),
            database: PathBuf::from("prodkit.db"),
            credentials: None,
            monitor_url: "http://127.0.0.1:8470".into(),
            policy: TimeoutPolicy::default(),
            housekeeping_interval: Duration::from_secs(10),
            dh_interval: Duration::from_secs(10),
            module_cache: None,
            session_ttl: Duration::from_secs(8 * 3600),
            spool: PathBuf::from("spool"),
            unmonitored_site: None,
            allow_file_modules: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    pub server: ServerSettings,
    pub system: BTreeMap<String, String>,
    pub environment: BTreeMap<String, String>,
    pub sites: Vec<SiteConfig>,
    pub bundles: BTreeMap<String, Bundle>,
}

fn bad(section: &str, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        section: section.to_string(),
        key: key.to_string(),
        message: message.into(),
    }
}

fn seconds(section: &str, key: &str, v: &str) -> Result<Duration> {
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s > 0.0)
        .map(Duration::from_secs_f64)
        .ok_or_else(|| bad(section, key, format!("expected positive seconds, got {v:?}")))
}

fn number<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| bad(section, key, format!("expected a number, got {v:?}")))
}

fn boolean(section: &str, key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(bad(section, key, format!("expected a boolean, got {v:?}"))),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| ConfigError::Unreadable {
            path: "<config>".into(),
            message: e.to_string(),
        })?;
        let section = |name: &str| -> BTreeMap<String, String> {
            ini.section(Some(name))
                .map(|p| p.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
                .unwrap_or_default()
        };
        let mut cfg = Config {
            system: section("system"),
            environment: section("environment"),
            ..Default::default()
        };

        let s = &mut cfg.server;
        for (k, v) in section("server") {
            match k.as_str() {
                "bind" => s.bind = v,
                "database" => s.database = PathBuf::from(v),
                "credentials" => s.credentials = Some(PathBuf::from(v)),
                "monitor_url" => s.monitor_url = v,
                "module_cache" => s.module_cache = Some(PathBuf::from(v)),
                "spool" => s.spool = PathBuf::from(v),
                "unmonitored_site" => s.unmonitored_site = Some(v),
                "allow_file_modules" => s.allow_file_modules = boolean("server", &k, &v)?,
                "max_retries" => {
                    s.policy.max_retries = match v.trim() {
                        "unlimited" | "inf" => None,
                        n => Some(number("server", &k, n)?),
                    }
                }
                "housekeeping_interval_s" => s.housekeeping_interval = seconds("server", &k, &v)?,
                "dh_interval_s" => s.dh_interval = seconds("server", &k, &v)?,
                "session_ttl_s" => s.session_ttl = seconds("server", &k, &v)?,
                other => match other.strip_prefix("timeout.") {
                    Some(state) => {
                        let st: JobState = state.parse().map_err(|_| bad("server", &k, "unknown state"))?;
                        s.policy = s.policy.clone().with_timeout(st, seconds("server", &k, &v)?);
                    }
                    None => return Err(bad("server", &k, "unknown key")),
                },
            }
        }

        for (platform, v) in section("bundles") {
            let (url, md5) = v
                .split_once(char::is_whitespace)
                .ok_or_else(|| bad("bundles", &platform, "expected `<url> <md5>`"))?;
            cfg.bundles.insert(
                platform,
                Bundle {
                    url: url.trim().to_string(),
                    md5: md5.trim().to_ascii_lowercase(),
                },
            );
        }

        let queue = section("queue");
        for (name, props) in ini.iter() {
            let Some(site_id) = name.and_then(|n| n.strip_prefix("site:")) else { continue };
            let sec = format!("site:{site_id}");
            let plugin = props.get("plugin").ok_or_else(|| ConfigError::Missing(sec.clone(), "plugin".into()))?;
            let mut site = SiteConfig::new(site_id, plugin, 1);
            site.system_params = cfg.system.clone();
            site.job_env = cfg.environment.clone();
            let mut opts: BTreeMap<String, String> = queue.clone();
            opts.extend(props.iter().map(|(k, v)| (k.to_string(), v.to_string())));
            let mut max_queued = None;
            for (k, v) in opts {
                match k.as_str() {
                    "plugin" => {}
                    "max_queued" => {
                        let n: usize = number(&sec, &k, &v)?;
                        if n == 0 {
                            return Err(bad(&sec, &k, "must be at least 1"));
                        }
                        max_queued = Some(n);
                    }
                    "poll_interval_s" => site.poll_interval = seconds(&sec, &k, &v)?,
                    "gpu" => site.capabilities.gpu = boolean(&sec, &k, &v)?,
                    "memory_mb" => site.capabilities.memory_mb = number(&sec, &k, &v)?,
                    "disk_mb" => site.capabilities.disk_mb = number(&sec, &k, &v)?,
                    "walltime_s" => site.capabilities.walltime_s = number(&sec, &k, &v)?,
                    _ => {
                        if let Some(var) = k.strip_prefix("env.") {
                            site.job_env.insert(var.to_string(), v);
                        } else if let Some(p) = k.strip_prefix("system.") {
                            site.system_params.insert(p.to_string(), v);
                        } else {
                            site.queueing_options.insert(k, v);
                        }
                    }
                }
            }
            site.max_queued = max_queued.ok_or_else(|| ConfigError::Missing(sec.clone(), "max_queued".into()))?;
            cfg.sites.push(site);
        }
        Ok(cfg)
    }

    pub fn site(&self, id: &str) -> Option<&SiteConfig> {
        self.sites.iter().find(|s| s.site_id == id)
    }
}
