//! The monitor's RPC methods.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use tracing::{info, warn};

use super::web::Sessions;
use crate::config::{Config, SiteConfig};
use crate::datastore::{
    ControlAction, Datastore, DatastoreError, FileDependency, OutputRecord, SiteRecord, StatMap, UnitRecord, View,
};
use crate::gridplugins::{create_plugin, site_tag, BackendHandle, GridPlugin, JobMaterialization};
use crate::lifecycle::UnitKey;
use crate::rpc::auth::{passkey_matches, CredentialStore, Principal};
use crate::rpc::{code, method, record, Dispatcher, Fault, HttpRequest, HttpResponse, Request, RequestAuth, Service, Value};
use crate::rpc::PROTOCOL_VERSION;
use crate::steering::{parse_steering, validate_steering, ModuleInstance, ParamValue, SteeringSpec};
use crate::taskmodules::external::{ExternalModuleRef, ModuleCache};
use crate::taskmodules::{lookup, validate_params, ModuleError};

/// Unmonitored submissions kept alive so their processes get reaped.
struct Unmonitored {
    site: SiteConfig,
    dir: PathBuf,
    launched: Vec<(BackendHandle, Box<dyn GridPlugin>)>,
}

/// Everything the request handlers share.
pub struct ServerState {
    pub db: Arc<Datastore>,
    pub config: Config,
    credentials: RwLock<CredentialStore>,
    modules: Option<Mutex<ModuleCache>>,
    pub(crate) sessions: Sessions,
    unmonitored: Mutex<Option<Unmonitored>>,
    unmonitored_seq: AtomicU64,
}

fn module_fault(e: ModuleError) -> Fault {
    Fault::invalid(e.to_string())
}

fn has_expressions(m: &ModuleInstance) -> bool {
    m.parameters.iter().any(|p| match &p.value {
        ParamValue::Text(t) => t.contains('$'),
        ParamValue::List(items) => items.iter().any(|i| i.contains('$')),
    })
}

pub(crate) fn unit_value(u: &UnitRecord) -> Value {
    record([
        ("key", u.key.to_string().into()),
        ("state", u.state.as_str().into()),
        ("retries", u.retries.into()),
        ("host", u.host.clone().into()),
        ("grid_id", u.grid_id.clone().into()),
        ("site", u.site.clone().into()),
        ("last_update", u.last_update.into()),
        ("state_entered", u.state_entered.into()),
        ("error", u.error.clone().into()),
    ])
}

fn site_value(s: &SiteRecord) -> Value {
    record([
        ("site_id", s.site_id.as_str().into()),
        ("plugin", s.plugin.as_str().into()),
        ("max_queued", s.max_queued.into()),
        ("enabled", s.enabled.into()),
        ("gpu", s.capabilities.gpu.into()),
        ("memory_mb", s.capabilities.memory_mb.into()),
        ("disk_mb", s.capabilities.disk_mb.into()),
        ("walltime_s", s.capabilities.walltime_s.into()),
    ])
}

fn parse_key(s: &str) -> Result<UnitKey, Fault> {
    s.parse().map_err(|e: String| Fault::invalid(e))
}

fn parse_action(s: &str) -> Result<ControlAction, Fault> {
    s.parse().map_err(|e: String| Fault::invalid(e))
}

fn parse_outputs(v: &Value) -> Result<Vec<OutputRecord>, Fault> {
    let items = v.as_array().ok_or_else(|| Fault::invalid("outputs must be an array"))?;
    items
        .iter()
        .map(|o| {
            let s = |k: &str| {
                o.get(k)
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| Fault::invalid(format!("output field {k:?} missing")))
            };
            let size = o.get("size").and_then(Value::as_i64).filter(|n| *n >= 0);
            Ok(OutputRecord {
                name: s("name")?,
                url: s("url")?,
                md5: s("md5")?.to_ascii_lowercase(),
                size: size.ok_or_else(|| Fault::invalid("output size must be a non-negative integer"))? as u64,
            })
        })
        .collect()
}

fn parse_stats(v: &Value) -> Result<StatMap, Fault> {
    let m = v.as_struct().ok_or_else(|| Fault::invalid("statistics must be a struct"))?;
    m.iter()
        .map(|(k, v)| {
            v.as_f64()
                .map(|x| (k.clone(), x))
                .ok_or_else(|| Fault::invalid(format!("statistic {k:?} is not a number")))
        })
        .collect()
}

fn str_map(v: Option<&Value>) -> Result<BTreeMap<String, String>, Fault> {
    let Some(v) = v else { return Ok(BTreeMap::new()) };
    let m = v.as_struct().ok_or_else(|| Fault::invalid("expected a struct"))?;
    m.iter()
        .map(|(k, v)| match v {
            Value::Str(s) => Ok((k.clone(), s.clone())),
            Value::Int(n) => Ok((k.clone(), n.to_string())),
            other => Err(Fault::invalid(format!("{k}: expected a string, got {}", other.kind()))),
        })
        .collect()
}

impl ServerState {
    pub fn new(db: Arc<Datastore>, config: Config, credentials: CredentialStore) -> Self {
        let unmonitored = config
            .server
            .unmonitored_site
            .as_ref()
            .and_then(|id| config.site(id))
            .map(|site| Unmonitored {
                site: site.clone(),
                dir: config.server.spool.join("unmonitored"),
                launched: Vec::new(),
            });
        let sessions = Sessions::new(config.server.session_ttl);
        ServerState {
            db,
            credentials: RwLock::new(credentials),
            modules: config.server.module_cache.as_ref().map(|d| {
                Mutex::new(ModuleCache::new(d).allow_file_urls(config.server.allow_file_modules))
            }),
            sessions,
            unmonitored: Mutex::new(unmonitored),
            unmonitored_seq: AtomicU64::new(0),
            config,
        }
    }

    /// Replaces the module cache, e.g. with one using a custom fetcher.
    pub fn with_module_cache(mut self, cache: ModuleCache) -> Self {
        self.modules = Some(Mutex::new(cache));
        self
    }

    pub fn authenticate(&self, cred: &crate::rpc::auth::UserCredential) -> Result<Principal, Fault> {
        let store = self.credentials.read().unwrap_or_else(|p| p.into_inner());
        Ok(store.authenticate(cred)?)
    }

    fn principal(&self, req: &Request) -> Result<Principal, Fault> {
        match &req.auth {
            RequestAuth::User(c) => self.authenticate(c),
            _ => Err(Fault::auth()),
        }
    }

    fn operator(&self, req: &Request) -> Result<Principal, Fault> {
        let p = self.principal(req)?;
        p.require_operator()?;
        Ok(p)
    }

    fn passkey<'a>(&self, req: &'a Request) -> Result<&'a str, Fault> {
        match &req.auth {
            RequestAuth::Passkey(p) => Ok(p),
            _ => Err(Fault::auth()),
        }
    }

    /// Stored copy of a module artifact, for `/modules/<md5>`.
    pub fn module_artifact(&self, md5: &str) -> Option<PathBuf> {
        let cache = self.modules.as_ref()?.lock().unwrap_or_else(|p| p.into_inner());
        cache.by_digest(md5)
    }

    /// Checks every module of a document and fetches external ones,
    /// returning the dependencies pilots must download.
    fn check_modules(&self, spec: &SteeringSpec) -> Result<Vec<FileDependency>, Fault> {
        let mut deps: BTreeMap<String, FileDependency> = BTreeMap::new();
        for m in spec.trays.iter().flat_map(|t| &t.modules) {
            match ExternalModuleRef::from_instance(m) {
                Some(r) => {
                    let r = r.map_err(module_fault)?;
                    let cache = self
                        .modules
                        .as_ref()
                        .ok_or_else(|| Fault::invalid("external modules are not enabled on this server"))?;
                    let cached = cache
                        .lock()
                        .unwrap_or_else(|p| p.into_inner())
                        .fetch_external(&r)
                        .map_err(module_fault)?;
                    let base = self.config.server.monitor_url.trim_end_matches('/');
                    deps.insert(
                        r.url.clone(),
                        FileDependency {
                            name: r.url,
                            url: format!("{base}/modules/{}", cached.md5),
                            md5: cached.md5,
                        },
                    );
                }
                None => {
                    let module = lookup(&m.class_name).map_err(module_fault)?;
                    // parameters holding expressions are checked once specialized
                    if !has_expressions(m) {
                        validate_params(m, module.schema(), module.accepts_extra()).map_err(module_fault)?;
                    }
                }
            }
        }
        Ok(deps.into_values().collect())
    }

    fn submit_dataset(&self, req: &Request) -> Result<Value, Fault> {
        let who = self.operator(req)?;
        let spec = parse_steering(req.str_param(0)?).map_err(|e| Fault::invalid(e.to_string()))?;
        let violations = validate_steering(&spec);
        if !violations.is_empty() {
            return Err(DatastoreError::ValidationFailed(violations).into());
        }
        let deps = self.check_modules(&spec)?;
        let id = self.db.create_dataset(&spec, &who.user, &deps)?;
        info!(dataset = id, submitter = %who.user, jobs = spec.meta.job_count, "dataset submitted");
        Ok(Value::Int(id))
    }

    fn control_dataset(&self, req: &Request) -> Result<Value, Fault> {
        let who = self.operator(req)?;
        let id = req.int_param(0)?;
        let action = parse_action(req.str_param(1)?)?;
        let (changed, skipped) = self.db.control_dataset(id, action)?;
        info!(dataset = id, action = action.as_str(), user = %who.user, changed, skipped, "dataset control");
        Ok(record([("changed", changed.into()), ("skipped", skipped.into())]))
    }

    fn control_job(&self, req: &Request) -> Result<Value, Fault> {
        let who = self.operator(req)?;
        let key = parse_key(req.str_param(0)?)?;
        let action = parse_action(req.str_param(1)?)?;
        let state = self.db.control(&key, action)?;
        info!(%key, action = action.as_str(), user = %who.user, "job control");
        Ok(state.as_str().into())
    }

    fn pilot_report(&self, req: &Request, report: crate::datastore::PilotReport) -> Result<Value, Fault> {
        let key = parse_key(req.str_param(0)?)?;
        let passkey = self.passkey(req)?;
        let state = self.db.pilot_report(&key, passkey, &report)?;
        Ok(state.as_str().into())
    }

    fn job_status(&self, req: &Request) -> Result<Value, Fault> {
        let key = parse_key(req.str_param(0)?)?;
        let passkey = self.passkey(req)?;
        let rec = self.db.unit(&key)?.ok_or(DatastoreError::UnknownJob(key.clone()))?;
        if !passkey_matches(&rec.passkey, passkey) {
            return Err(DatastoreError::BadPasskey(key).into());
        }
        Ok(rec.state.as_str().into())
    }

    fn system_for(&self, site: Option<&str>) -> BTreeMap<String, String> {
        let mut system = self.config.system.clone();
        if let Some(s) = site.and_then(|id| self.config.site(id)) {
            system.extend(s.system_params.clone());
        }
        system
    }

    fn get_steering(&self, req: &Request) -> Result<Value, Fault> {
        let (dataset, key) = match req.param(0)? {
            Value::Int(id) => (*id, None),
            Value::Str(s) if s.contains('.') => {
                let k = parse_key(s)?;
                (k.dataset_id, Some(k))
            }
            Value::Str(s) => (s.trim().parse().map_err(|_| Fault::invalid("bad dataset id"))?, None),
            other => return Err(Fault::invalid(format!("get_steering: unexpected {}", other.kind()))),
        };
        let mut site = None;
        match (&req.auth, &key) {
            (RequestAuth::Passkey(p), Some(k)) => {
                let rec = self.db.unit(k)?.ok_or(DatastoreError::UnknownJob(k.clone()))?;
                if !passkey_matches(&rec.passkey, p) {
                    return Err(DatastoreError::BadPasskey(k.clone()).into());
                }
                site = rec.site;
            }
            _ => {
                self.principal(req)?;
            }
        }
        let info = self.db.dataset(dataset)?;
        let deps: Vec<Value> = self
            .db
            .file_dependencies(dataset)?
            .iter()
            .map(|d| {
                record([
                    ("name", d.name.as_str().into()),
                    ("url", d.url.as_str().into()),
                    ("md5", d.md5.as_str().into()),
                ])
            })
            .collect();
        let mut inputs = Vec::new();
        let mut registry = BTreeMap::new();
        if let Some(k) = &key {
            for e in self.db.job_inputs(dataset, k.job_index)? {
                inputs.push(record([
                    ("path", e.path.into()),
                    ("size", e.size.into()),
                    ("run_number", e.run_number.into()),
                    ("date", e.date.into()),
                    ("md5", e.md5.into()),
                ]));
            }
            for o in self.db.outputs(&k.job_key())? {
                registry.insert(o.url, Value::Str(o.md5));
            }
        }
        Ok(record([
            ("dataset_id", dataset.into()),
            ("job_count", info.job_count.into()),
            ("steering", self.db.steering_xml(dataset)?.into()),
            ("dependencies", Value::Array(deps)),
            ("system", self.system_for(site.as_deref()).into()),
            ("inputs", Value::Array(inputs)),
            ("registry", Value::Struct(registry)),
        ]))
    }

    fn bundle_url(&self, req: &Request) -> Result<Value, Fault> {
        let platform = req.str_param(0)?;
        let b = self
            .config
            .bundles
            .get(platform)
            .or_else(|| self.config.bundles.get("generic"))
            .ok_or_else(|| Fault::invalid(format!("no software bundle for platform {platform:?}")))?;
        Ok(record([("url", b.url.as_str().into()), ("md5", b.md5.as_str().into())]))
    }

    fn server_admin(&self, req: &Request) -> Result<Value, Fault> {
        let command = req.str_param(0)?;
        let args = req.opt_param(1);
        let arg = |k: &str| args.and_then(|a| a.get(k));
        let site_id = || {
            arg("site_id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| Fault::invalid(format!("{command}: site_id is required")))
        };
        match command {
            "version" => {
                self.principal(req)?;
                Ok(PROTOCOL_VERSION.into())
            }
            "sites" => {
                self.principal(req)?;
                Ok(Value::Array(self.db.sites()?.iter().map(site_value).collect()))
            }
            "site_add" => {
                let who = self.operator(req)?;
                let id = site_id()?;
                let int = |k: &str| arg(k).and_then(Value::as_i64).unwrap_or(0).max(0) as u64;
                let max_queued = arg("max_queued")
                    .and_then(Value::as_i64)
                    .filter(|n| *n >= 1)
                    .ok_or_else(|| Fault::invalid("site_add: max_queued must be at least 1"))?;
                let rec = SiteRecord {
                    site_id: id.clone(),
                    plugin: arg("plugin").and_then(Value::as_str).unwrap_or("local").to_string(),
                    capabilities: crate::dagengine::SiteCapabilities {
                        gpu: arg("gpu").and_then(Value::as_bool).unwrap_or(false),
                        memory_mb: int("memory_mb"),
                        disk_mb: int("disk_mb"),
                        walltime_s: int("walltime_s"),
                    },
                    max_queued: max_queued as u32,
                    enabled: arg("enabled").and_then(Value::as_bool).unwrap_or(true),
                };
                self.db.upsert_site(&rec)?;
                info!(site = %id, user = %who.user, "site added");
                Ok(true.into())
            }
            "site_remove" | "site_start" | "site_stop" => {
                let who = self.operator(req)?;
                let id = site_id()?;
                let done = match command {
                    "site_remove" => self.db.remove_site(&id)?,
                    "site_start" => self.db.set_site_enabled(&id, true)?,
                    _ => self.db.set_site_enabled(&id, false)?,
                };
                info!(site = %id, user = %who.user, command, "site admin");
                Ok(done.into())
            }
            other => Err(Fault::new(code::METHOD_NOT_FOUND, format!("unknown admin command {other:?}"))),
        }
    }

    fn query_view(&self, req: &Request) -> Result<Value, Fault> {
        self.principal(req)?;
        let view: View = req.str_param(0)?.parse().map_err(Fault::invalid)?;
        let filters = str_map(req.opt_param(1))?;
        let rows = self.db.query_view(view, &filters)?;
        Ok(Value::Array(
            rows.iter()
                .map(|r| Value::Struct(r.iter().map(|(k, v)| (k.clone(), Value::from_json(v))).collect()))
                .collect(),
        ))
    }

    fn dataset_stats(&self, req: &Request) -> Result<Value, Fault> {
        self.principal(req)?;
        let id = req.int_param(0)?;
        self.db.dataset(id)?;
        let summary = self.db.aggregate_stats(id)?;
        Ok(Value::Struct(
            summary
                .into_iter()
                .map(|(k, s)| {
                    let v = record([
                        ("count", s.count.into()),
                        ("sum", s.sum.into()),
                        ("average", s.average.into()),
                        ("stddev", s.stddev.into()),
                    ]);
                    (k, v)
                })
                .collect(),
        ))
    }

    /// Hands one job straight to the configured local backend. Nothing
    /// is recorded; the pilot reads the steering from a file.
    fn enqueue_unmonitored(&self, req: &Request) -> Result<Value, Fault> {
        let who = self.operator(req)?;
        let xml = req.str_param(0)?;
        let job_index = match req.opt_param(1) {
            Some(_) => req.int_param(1)?.max(0) as u64,
            None => 0,
        };
        let spec = parse_steering(xml).map_err(|e| Fault::invalid(e.to_string()))?;
        let violations = validate_steering(&spec);
        if !violations.is_empty() {
            return Err(DatastoreError::ValidationFailed(violations).into());
        }
        if spec.trays.iter().flat_map(|t| &t.modules).any(|m| m.class_name == crate::taskmodules::external::EXTERNAL_CLASS) {
            return Err(Fault::invalid("unmonitored runs support built-in modules only"));
        }
        self.check_modules(&spec)?;

        let mut guard = self.unmonitored.lock().unwrap_or_else(|p| p.into_inner());
        let u = guard
            .as_mut()
            .ok_or_else(|| Fault::invalid("no site is configured for unmonitored runs"))?;
        let seq = self.unmonitored_seq.fetch_add(1, Ordering::SeqCst);
        let mut site = u.site.clone();
        let tag = format!("{}.u{}x{seq}", site_tag(&u.site), self.db.now());
        site.queueing_options.insert("tag".into(), tag);
        let mut plugin = create_plugin(&site).map_err(|e| Fault::new(code::INTERNAL, e.to_string()))?;
        std::fs::create_dir_all(&u.dir).map_err(|e| Fault::new(code::INTERNAL, e.to_string()))?;
        let key = UnitKey::job(0, job_index);
        let steering_file = u.dir.join(format!("{}.xml", crate::gridplugins::submit_name(plugin.tag(), &key)));
        std::fs::write(&steering_file, xml).map_err(|e| Fault::new(code::INTERNAL, e.to_string()))?;
        let job = JobMaterialization {
            key,
            passkey: String::new(),
            monitor_url: String::new(),
            requirements: spec.effective_tasks().first().map(|t| t.requirements).unwrap_or_default(),
            steering_file: Some(steering_file),
        };
        let plugin_fault = |e: crate::gridplugins::PluginError| Fault::new(code::INTERNAL, e.to_string());
        let artifacts = plugin.write_config(&job, &site, &u.dir).map_err(plugin_fault)?;
        let handle = plugin.submit(&artifacts).map_err(plugin_fault)?;
        info!(%handle, user = %who.user, "unmonitored job launched");
        // reap earlier launches that have exited
        u.launched.retain_mut(|(h, p)| {
            let done = p
                .check_status(std::slice::from_ref(h))
                .map(|m| m.get(h).is_some_and(|s| matches!(s, crate::gridplugins::BackendStatus::Finished | crate::gridplugins::BackendStatus::Vanished)))
                .unwrap_or(false);
            !done
        });
        u.launched.push((handle.clone(), plugin));
        Ok(record([
            ("handle", handle.into()),
            ("submit_name", artifacts.submit_name.into()),
        ]))
    }
}

/// The monitor's RPC service plus its plain HTTP routes.
pub struct MonitorService {
    pub state: Arc<ServerState>,
    dispatcher: Dispatcher,
}

impl MonitorService {
    pub fn new(state: Arc<ServerState>) -> Self {
        use crate::datastore::PilotReport as P;
        let mut d = Dispatcher::new();
        macro_rules! reg {
            ($name:expr, |$s:ident, $r:ident| $body:expr) => {{
                let $s = state.clone();
                d.register($name, move |$r: &Request| $body);
            }};
        }
        reg!(method::SUBMIT_DATASET, |s, r| s.submit_dataset(r));
        reg!(method::CONTROL_DATASET, |s, r| s.control_dataset(r));
        reg!(method::CONTROL_JOB, |s, r| s.control_job(r));
        reg!(method::ENQUEUE_UNMONITORED, |s, r| s.enqueue_unmonitored(r));
        reg!(method::JOB_STARTED, |s, r| {
            let host = r.str_param(1)?.to_string();
            s.pilot_report(r, P::Started { host })
        });
        reg!(method::JOB_STATUS, |s, r| s.job_status(r));
        reg!(method::JOB_STATS, |s, r| {
            let stats = parse_stats(r.param(1)?)?;
            s.pilot_report(r, P::Stats(stats)).map(|_| Value::Bool(true))
        });
        reg!(method::JOB_FINISHED, |s, r| {
            let outputs = match r.opt_param(1) {
                Some(v) => parse_outputs(v)?,
                None => Vec::new(),
            };
            s.pilot_report(r, P::Finished { outputs })
        });
        reg!(method::JOB_ERROR, |s, r| {
            let message = r.str_param(1)?.to_string();
            s.pilot_report(r, P::Error { message })
        });
        reg!(method::KEEPALIVE, |s, r| s.pilot_report(r, P::Keepalive));
        reg!(method::GET_STEERING, |s, r| s.get_steering(r));
        reg!(method::GET_PLATFORM_BUNDLE_URL, |s, r| s.bundle_url(r));
        reg!(method::SERVER_ADMIN, |s, r| s.server_admin(r));
        reg!(method::QUERY_VIEW, |s, r| s.query_view(r));
        reg!(method::DATASET_STATS, |s, r| s.dataset_stats(r));
        MonitorService { state, dispatcher: d }
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }
}

impl Service for MonitorService {
    fn call(&self, req: &Request) -> Result<Value, Fault> {
        let out = self.dispatcher.dispatch(req);
        if let Err(f) = &out {
            if f.code == code::INTERNAL || f.code == code::UNAVAILABLE {
                warn!(method = %req.method, fault = %f, "request failed");
            }
        }
        out
    }

    fn http(&self, req: &HttpRequest) -> Option<HttpResponse> {
        if let Some(md5) = req.path.strip_prefix("/modules/") {
            return Some(self.module_route(req, md5));
        }
        if req.path == "/api" || req.path.starts_with("/api/") {
            return Some(super::web::route(&self.state, req));
        }
        None
    }
}

impl MonitorService {
    fn module_route(&self, req: &HttpRequest, md5: &str) -> HttpResponse {
        let not_found = HttpResponse::json(404, &serde_json::json!({"error": "not found"}));
        if req.method != "GET" || md5.len() != 32 || !md5.bytes().all(|b| b.is_ascii_hexdigit()) {
            return not_found;
        }
        match self.state.module_artifact(&md5.to_ascii_lowercase()).map(std::fs::read) {
            Some(Ok(body)) => HttpResponse {
                status: 200,
                content_type: "application/octet-stream".into(),
                headers: Vec::new(),
                body,
            },
            _ => not_found,
        }
    }
}
