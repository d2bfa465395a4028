//! Module execution. A module instance from the steering document is
//! resolved to a built-in or an external module, its parameters are
//! checked against the module's schema, and it runs inside the pilot's
//! scratch directory, adding statistics to the job's [`StatMap`].

mod builtins;
pub mod external;

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::time::Duration;

use crate::datastore::{OutputRecord, StatMap};
use crate::steering::{ModuleInstance, ParamType, ParamValue};
use crate::storage::{Storage, StorageError};

pub use builtins::BUILTIN_CLASSES;
pub use external::{ExternalModuleRef, Fetcher, ModuleCache, EXTERNAL_CLASS};

#[derive(Debug, thiserror::Error)]
pub enum ModuleError {
    #[error("unknown module class {0:?}")]
    UnknownClass(String),
    #[error("module {module}: {message}")]
    ParamValidation { module: String, message: String },
    #[error("module {module}: path {path:?} leaves the scratch directory")]
    Confinement { module: String, path: String },
    #[error("{url}: digest {actual} does not match {expected}")]
    DigestMismatch {
        url: String,
        expected: String,
        actual: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("module {module} failed: {message}")]
    Failed { module: String, message: String },
    #[error("{0}: only https (or file for testing) locations are allowed")]
    SchemeRejected(String),
    #[error("cannot fetch {url}: {message}")]
    FetchFailure { url: String, message: String },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModuleError + '_ {
    move |source| ModuleError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub type Result<T> = std::result::Result<T, ModuleError>;

#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: ParamType,
    pub required: bool,
}

const fn req(name: &'static str, kind: ParamType) -> ParamSpec {
    ParamSpec {
        name,
        kind,
        required: true,
    }
}

const fn opt(name: &'static str, kind: ParamType) -> ParamSpec {
    ParamSpec {
        name,
        kind,
        required: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolved {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    List(Vec<String>),
}

/// Parameters checked against a schema.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    values: BTreeMap<String, Resolved>,
    /// Parameters outside the schema, kept only for external modules.
    pub extra: BTreeMap<String, String>,
}

impl Params {
    pub fn str(&self, name: &str) -> Option<&str> {
        match self.values.get(name) {
            Some(Resolved::Str(s)) => Some(s),
            _ => None,
        }
    }

    pub fn int(&self, name: &str) -> Option<i64> {
        match self.values.get(name) {
            Some(Resolved::Int(i)) => Some(*i),
            _ => None,
        }
    }

    pub fn float(&self, name: &str) -> Option<f64> {
        match self.values.get(name) {
            Some(Resolved::Float(f)) => Some(*f),
            Some(Resolved::Int(i)) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn bool(&self, name: &str) -> Option<bool> {
        match self.values.get(name) {
            Some(Resolved::Bool(b)) => Some(*b),
            _ => None,
        }
    }

    pub fn list(&self, name: &str) -> Option<&[String]> {
        match self.values.get(name) {
            Some(Resolved::List(l)) => Some(l),
            _ => None,
        }
    }
}

fn resolve(text: &str, kind: ParamType) -> Option<Resolved> {
    let t = text.trim();
    Some(match kind {
        ParamType::String => Resolved::Str(text.to_string()),
        ParamType::Int => Resolved::Int(t.parse().ok()?),
        ParamType::Float => Resolved::Float(t.parse().ok().filter(|f: &f64| f.is_finite())?),
        ParamType::Bool => Resolved::Bool(match t.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            _ => return None,
        }),
        ParamType::ListString => Resolved::List(t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()),
    })
}

/// Checks `instance`'s parameters against `schema`. Unknown parameters
/// are an error unless `keep_extra` is set.
pub fn validate_params(instance: &ModuleInstance, schema: &[ParamSpec], keep_extra: bool) -> Result<Params> {
    let bad = |message: String| ModuleError::ParamValidation {
        module: instance.name.clone(),
        message,
    };
    let mut out = Params::default();
    for p in &instance.parameters {
        let Some(spec) = schema.iter().find(|s| s.name == p.name) else {
            if !keep_extra {
                return Err(bad(format!("unknown parameter {:?}", p.name)));
            }
            let text = match &p.value {
                ParamValue::Text(t) => t.clone(),
                ParamValue::List(l) => l.join(","),
            };
            out.extra.insert(p.name.clone(), text);
            continue;
        };
        let value = match (&p.value, spec.kind) {
            (ParamValue::List(items), ParamType::ListString) => Some(Resolved::List(items.clone())),
            (ParamValue::List(_), _) => None,
            (ParamValue::Text(t), kind) => resolve(t, kind),
        };
        let value = value.ok_or_else(|| bad(format!("parameter {:?} is not a valid {}", p.name, spec.kind.as_str())))?;
        out.values.insert(p.name.clone(), value);
    }
    if let Some(missing) = schema.iter().find(|s| s.required && !out.values.contains_key(s.name)) {
        return Err(bad(format!("missing required parameter {:?}", missing.name)));
    }
    Ok(out)
}

/// Everything a module may touch.
pub struct ModuleContext {
    pub scratch: PathBuf,
    pub storage: Storage,
    /// Base location for relative transfer destinations.
    pub storage_base: Option<String>,
    /// Known digests by location.
    pub registry: BTreeMap<String, String>,
    /// Outputs uploaded so far.
    pub outputs: Vec<OutputRecord>,
    /// Local copies of external module artifacts, by module URL.
    pub externals: BTreeMap<String, PathBuf>,
    /// Extra environment for external modules.
    pub env: BTreeMap<String, String>,
}

impl ModuleContext {
    pub fn new(scratch: &Path) -> Self {
        ModuleContext {
            scratch: scratch.to_path_buf(),
            storage: Storage::default(),
            storage_base: None,
            registry: BTreeMap::new(),
            outputs: Vec::new(),
            externals: BTreeMap::new(),
            env: BTreeMap::new(),
        }
    }

    /// Resolves a relative path inside the scratch directory.
    pub fn confined(&self, module: &str, rel: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        let ok = !rel.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
        if !ok {
            return Err(ModuleError::Confinement {
                module: module.to_string(),
                path: rel.to_string(),
            });
        }
        Ok(self.scratch.join(p))
    }

    /// A location given either as a URL or relative to the storage base.
    pub fn location(&self, module: &str, s: &str) -> Result<String> {
        if s.contains("://") {
            return Ok(s.to_string());
        }
        match &self.storage_base {
            Some(base) => Ok(crate::storage::join_url(base, s)),
            None => Err(ModuleError::ParamValidation {
                module: module.to_string(),
                message: format!("{s:?} is not a URL and no storage base is configured"),
            }),
        }
    }
}

/// A module implementation.
pub trait IpModule {
    fn schema(&self) -> &[ParamSpec];

    /// External modules accept parameters outside their schema.
    fn accepts_extra(&self) -> bool {
        false
    }

    fn execute(&self, name: &str, params: &Params, ctx: &mut ModuleContext, stats: &mut StatMap) -> Result<()>;
}

/// Looks up the implementation for a class name.
pub fn lookup(class_name: &str) -> Result<Box<dyn IpModule>> {
    if class_name == EXTERNAL_CLASS {
        return Ok(Box::new(external::ExternalModule));
    }
    builtins::builtin(class_name).ok_or_else(|| ModuleError::UnknownClass(class_name.to_string()))
}

/// User plus system CPU time of this process and its reaped children.
pub fn cpu_time() -> Duration {
    fn tv(t: libc::timeval) -> Duration {
        Duration::from_secs(t.tv_sec as u64) + Duration::from_micros(t.tv_usec as u64)
    }
    let mut total = Duration::ZERO;
    for who in [libc::RUSAGE_SELF, libc::RUSAGE_CHILDREN] {
        // SAFETY: getrusage fills the zeroed struct we pass
        let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
        if unsafe { libc::getrusage(who, &mut ru) } == 0 {
            total += tv(ru.ru_utime) + tv(ru.ru_stime);
        }
    }
    total
}

/// Runs one module instance. `stats` always gains `<name>.cpu_s`, even
/// when the module fails; a module's own entries overwrite earlier ones.
pub fn execute(instance: &ModuleInstance, ctx: &mut ModuleContext, stats: &mut StatMap) -> Result<()> {
    let module = lookup(&instance.class_name)?;
    let params = validate_params(instance, module.schema(), module.accepts_extra())?;
    let before = cpu_time();
    let mut own = StatMap::new();
    let outcome = module.execute(&instance.name, &params, ctx, &mut own);
    let cpu = cpu_time().saturating_sub(before).as_secs_f64();
    for (k, v) in own {
        if stats.insert(k.clone(), v).is_some() {
            tracing::warn!(module = %instance.name, stat = %k, "statistic overwritten by later module");
        }
    }
    stats.insert(format!("{}.cpu_s", instance.name), cpu);
    outcome
}
