//! External modules: a script fetched by the server at submission time
//! and shipped to pilots as a file dependency.
//!
//! In the steering document an external module has class `external` and
//! the parameters `class` and `URL` (plus an optional pinned `md5`).
//! Other parameters are passed to the script as `PK_PARAM_<name>`
//! environment variables. The script runs under `sh` in the scratch
//! directory with the class name as its argument, and may print
//! `STAT <name> <value>` lines to report statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;

use super::{io_err, opt, req, IpModule, ModuleContext, ModuleError, ParamSpec, Params, Result};
use crate::datastore::StatMap;
use crate::digest::md5_hex;
use crate::steering::ModuleInstance;
use crate::steering::ParamType::String as Str;

pub const EXTERNAL_CLASS: &str = "external";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalModuleRef {
    pub class_name: String,
    pub url: String,
    pub md5: Option<String>,
}

impl ExternalModuleRef {
    /// `None` for modules that are not external.
    pub fn from_instance(m: &ModuleInstance) -> Option<Result<Self>> {
        if m.class_name != EXTERNAL_CLASS {
            return None;
        }
        let get = |k: &str| m.param(k).and_then(|p| p.as_text()).map(|s| s.trim().to_string());
        Some(match (get("class"), get("URL")) {
            (Some(class_name), Some(url)) => Ok(ExternalModuleRef {
                class_name,
                url,
                md5: get("md5").map(|d| d.to_ascii_lowercase()),
            }),
            _ => Err(ModuleError::ParamValidation {
                module: m.name.clone(),
                message: "external modules need class and URL".into(),
            }),
        })
    }
}

/// Allowed schemes: https, and file when `allow_file` is set.
pub fn check_scheme(url: &str, allow_file: bool) -> Result<()> {
    let lower = url.to_ascii_lowercase();
    if lower.starts_with("https://") || (allow_file && lower.starts_with("file:///")) {
        Ok(())
    } else {
        Err(ModuleError::SchemeRejected(url.to_string()))
    }
}

pub trait Fetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Vec<u8>>;
}

/// Fetches over https, or from the local filesystem for `file:` URLs.
pub struct NetFetcher;

impl Fetcher for NetFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>> {
        let fail = |message: String| ModuleError::FetchFailure {
            url: url.to_string(),
            message,
        };
        if let Some(path) = url.strip_prefix("file://") {
            return fs::read(path).map_err(|e| fail(e.to_string()));
        }
        let resp = ureq::get(url).call().map_err(|e| fail(e.to_string()))?;
        let mut body = Vec::new();
        std::io::Read::read_to_end(&mut resp.into_reader().take(64 << 20), &mut body).map_err(|e| fail(e.to_string()))?;
        Ok(body)
    }
}

use std::io::Read as _;

/// A fetched module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedModule {
    pub path: PathBuf,
    pub md5: String,
}

/// Server-side cache of external modules keyed by (URL, pinned digest).
pub struct ModuleCache {
    dir: PathBuf,
    allow_file: bool,
    fetcher: Box<dyn Fetcher>,
    lock: Mutex<()>,
}

impl ModuleCache {
    pub fn new(dir: &Path) -> Self {
        ModuleCache {
            dir: dir.to_path_buf(),
            allow_file: false,
            fetcher: Box::new(NetFetcher),
            lock: Mutex::new(()),
        }
    }

    pub fn with_fetcher(mut self, fetcher: impl Fetcher + 'static) -> Self {
        self.fetcher = Box::new(fetcher);
        self
    }

    /// Accepts `file:` URLs; meant for tests.
    pub fn allow_file_urls(mut self, allow: bool) -> Self {
        self.allow_file = allow;
        self
    }

    fn key_path(&self, r: &ExternalModuleRef) -> PathBuf {
        let pin = r.md5.as_deref().unwrap_or("unpinned");
        self.dir.join("by-ref").join(format!("{}-{pin}", md5_hex(r.url.as_bytes())))
    }

    /// Stored copy with the given digest, for serving to pilots.
    pub fn by_digest(&self, md5: &str) -> Option<PathBuf> {
        let ok = md5.len() == 32 && md5.bytes().all(|b| b.is_ascii_hexdigit());
        let p = self.dir.join("by-md5").join(md5.to_ascii_lowercase());
        (ok && p.is_file()).then_some(p)
    }

    pub fn fetch_external(&self, r: &ExternalModuleRef) -> Result<CachedModule> {
        check_scheme(&r.url, self.allow_file)?;
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let key = self.key_path(r);
        if let Ok(bytes) = fs::read(&key) {
            let md5 = md5_hex(&bytes);
            if r.md5.as_deref().map_or(true, |pin| pin == md5) {
                return self.store(bytes, md5, &key);
            }
        }
        let bytes = self.fetcher.fetch(&r.url)?;
        let md5 = md5_hex(&bytes);
        if let Some(pin) = &r.md5 {
            if *pin != md5 {
                return Err(ModuleError::DigestMismatch {
                    url: r.url.clone(),
                    expected: pin.clone(),
                    actual: md5,
                });
            }
        }
        self.store(bytes, md5, &key)
    }

    fn store(&self, bytes: Vec<u8>, md5: String, key: &Path) -> Result<CachedModule> {
        let by_md5 = self.dir.join("by-md5").join(&md5);
        for p in [key, by_md5.as_path()] {
            if !p.is_file() {
                let parent = p.parent().expect("cache paths have parents");
                fs::create_dir_all(parent).map_err(io_err(parent))?;
                let tmp = p.with_extension("tmp");
                fs::write(&tmp, &bytes).and_then(|_| fs::rename(&tmp, p)).map_err(io_err(p))?;
            }
        }
        Ok(CachedModule { path: by_md5, md5 })
    }
}

pub(super) struct ExternalModule;

impl IpModule for ExternalModule {
    fn schema(&self) -> &[ParamSpec] {
        const S: &[ParamSpec] = &[req("class", Str), req("URL", Str), opt("md5", Str)];
        S
    }

    fn accepts_extra(&self) -> bool {
        true
    }

    fn execute(&self, name: &str, p: &Params, ctx: &mut ModuleContext, stats: &mut StatMap) -> Result<()> {
        let url = p.str("URL").unwrap_or_default().trim();
        let artifact = ctx.externals.get(url).cloned().ok_or_else(|| ModuleError::Failed {
            module: name.to_string(),
            message: format!("{url} was not shipped with the job"),
        })?;
        let mut env: BTreeMap<String, String> = ctx.env.clone();
        for (k, v) in &p.extra {
            env.insert(format!("PK_PARAM_{k}"), v.clone());
        }
        env.insert("PK_SCRATCH".into(), ctx.scratch.display().to_string());
        let out = Command::new("sh")
            .arg(&artifact)
            .arg(p.str("class").unwrap_or_default())
            .current_dir(&ctx.scratch)
            .envs(&env)
            .stdin(Stdio::null())
            .output()
            .map_err(io_err(&artifact))?;
        for line in String::from_utf8_lossy(&out.stdout).lines() {
            let mut f = line.split_whitespace();
            if let (Some("STAT"), Some(k), Some(v), None) = (f.next(), f.next(), f.next(), f.next()) {
                match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => {
                        stats.insert(k.to_string(), x);
                    }
                    _ => tracing::warn!(module = %name, line, "ignoring malformed statistic"),
                }
            }
        }
        if !out.status.success() {
            let err = String::from_utf8_lossy(&out.stderr);
            let tail: String = err.lines().rev().take(5).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
            return Err(ModuleError::Failed {
                module: name.to_string(),
                message: format!("exited with {}: {tail}", out.status),
            });
        }
        Ok(())
    }
}
