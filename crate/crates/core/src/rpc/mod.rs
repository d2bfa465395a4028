//! Wire protocol: XML-RPC envelopes over HTTP POST `/rpc`, with a JSON
//! mapping selected by content type.

pub mod auth;
pub mod client;
pub mod codec;
pub mod server;
pub mod value;

use std::collections::HashMap;
use std::sync::Arc;

use crate::datastore::DatastoreError;
use auth::{AuthError, UserCredential};

pub use client::{Client, ClientError};
pub use server::{serve, HttpRequest, HttpResponse, ServerHandle, Service};
pub use value::{record, Value};

pub const PROTOCOL_VERSION: &str = "prodkit-rpc/1";

/// Fault codes.
pub mod code {
    pub const DECODE: i32 = 400;
    pub const AUTH: i32 = 401;
    pub const FORBIDDEN: i32 = 403;
    pub const METHOD_NOT_FOUND: i32 = 404;
    pub const STALE_STATE: i32 = 409;
    pub const VALIDATION: i32 = 422;
    pub const INTERNAL: i32 = 500;
    pub const UNAVAILABLE: i32 = 503;
}

/// Registered method names.
pub mod method {
    pub const SUBMIT_DATASET: &str = "submit_dataset";
    pub const CONTROL_DATASET: &str = "control_dataset";
    pub const CONTROL_JOB: &str = "control_job";
    pub const ENQUEUE_UNMONITORED: &str = "enqueue_unmonitored";
    pub const JOB_STARTED: &str = "job_started";
    pub const JOB_STATUS: &str = "job_status";
    pub const JOB_STATS: &str = "job_stats";
    pub const JOB_FINISHED: &str = "job_finished";
    pub const JOB_ERROR: &str = "job_error";
    pub const KEEPALIVE: &str = "keepalive";
    pub const GET_STEERING: &str = "get_steering";
    pub const GET_PLATFORM_BUNDLE_URL: &str = "get_platform_bundle_url";
    pub const SERVER_ADMIN: &str = "server_admin";
    /// Read-only monitoring queries.
    pub const QUERY_VIEW: &str = "query_view";
    pub const DATASET_STATS: &str = "dataset_stats";

    pub const ALL: [&str; 15] = [
        SUBMIT_DATASET,
        CONTROL_DATASET,
        CONTROL_JOB,
        ENQUEUE_UNMONITORED,
        JOB_STARTED,
        JOB_STATUS,
        JOB_STATS,
        JOB_FINISHED,
        JOB_ERROR,
        KEEPALIVE,
        GET_STEERING,
        GET_PLATFORM_BUNDLE_URL,
        SERVER_ADMIN,
        QUERY_VIEW,
        DATASET_STATS,
    ];
}

/// A structured error returned to the caller.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("fault {code}: {message}")]
pub struct Fault {
    pub code: i32,
    pub message: String,
}

impl Fault {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Fault {
            code,
            message: message.into(),
        }
    }

    pub fn method_not_found(name: &str) -> Self {
        Fault::new(code::METHOD_NOT_FOUND, format!("no method {name:?}"))
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Fault::new(code::VALIDATION, message)
    }

    pub fn auth() -> Self {
        Fault::new(code::AUTH, "authentication failed")
    }

    pub fn is_auth(&self) -> bool {
        matches!(self.code, code::AUTH | code::FORBIDDEN)
    }
}

impl From<AuthError> for Fault {
    fn from(e: AuthError) -> Self {
        match e {
            AuthError::Forbidden => Fault::new(code::FORBIDDEN, e.to_string()),
            AuthError::AuthFailed => Fault::auth(),
            other => Fault::new(code::INTERNAL, other.to_string()),
        }
    }
}

impl From<DatastoreError> for Fault {
    fn from(e: DatastoreError) -> Self {
        use DatastoreError as E;
        let c = match &e {
            E::BadPasskey(_) => code::AUTH,
            E::StaleState { .. } => code::STALE_STATE,
            E::StorageUnavailable(_) => code::UNAVAILABLE,
            E::Corrupt(_) => code::INTERNAL,
            _ => code::VALIDATION,
        };
        Fault::new(c, e.to_string())
    }
}

/// How a request identified itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum RequestAuth {
    #[default]
    None,
    User(UserCredential),
    Passkey(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub method: String,
    pub params: Vec<Value>,
    pub auth: RequestAuth,
}

impl Request {
    pub fn param(&self, i: usize) -> Result<&Value, Fault> {
        self.params
            .get(i)
            .ok_or_else(|| Fault::invalid(format!("{}: missing parameter {}", self.method, i + 1)))
    }

    pub fn str_param(&self, i: usize) -> Result<&str, Fault> {
        let v = self.param(i)?;
        v.as_str()
            .ok_or_else(|| Fault::invalid(format!("{}: parameter {} must be a string, got {}", self.method, i + 1, v.kind())))
    }

    pub fn int_param(&self, i: usize) -> Result<i64, Fault> {
        let v = self.param(i)?;
        match v {
            Value::Int(n) => Ok(*n),
            Value::Str(s) => s.trim().parse().map_err(|_| Fault::invalid(format!("{}: parameter {} must be an integer", self.method, i + 1))),
            _ => Err(Fault::invalid(format!("{}: parameter {} must be an integer, got {}", self.method, i + 1, v.kind()))),
        }
    }

    pub fn opt_param(&self, i: usize) -> Option<&Value> {
        self.params.get(i)
    }
}

type Handler = Arc<dyn Fn(&Request) -> Result<Value, Fault> + Send + Sync>;

/// A method table.
#[derive(Clone, Default)]
pub struct Dispatcher {
    methods: HashMap<String, Handler>,
}

impl Dispatcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, f: impl Fn(&Request) -> Result<Value, Fault> + Send + Sync + 'static) {
        self.methods.insert(name.to_string(), Arc::new(f));
    }

    pub fn has(&self, name: &str) -> bool {
        self.methods.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.methods.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }

    pub fn dispatch(&self, req: &Request) -> Result<Value, Fault> {
        match self.methods.get(&req.method) {
            Some(h) => h(req),
            None => Err(Fault::method_not_found(&req.method)),
        }
    }
}

impl Service for Dispatcher {
    fn call(&self, req: &Request) -> Result<Value, Fault> {
        self.dispatch(req)
    }
}
