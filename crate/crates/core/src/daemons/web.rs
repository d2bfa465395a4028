//! JSON endpoints behind session cookies, for a browser front end.
//!
//! `POST /api/login` trades a username and secret for a session cookie;
//! every other route needs that cookie. Writes additionally need the
//! operator role.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde_json::{json, Value as Json};

use super::service::{unit_value, ServerState};
use crate::datastore::{ControlAction, DatastoreError, View};
use crate::lifecycle::UnitKey;
use crate::rpc::auth::{Principal, UserCredential};
use crate::rpc::{method, Fault, HttpRequest, HttpResponse};

pub const SESSION_COOKIE: &str = "pk_session";

/// RPC methods behind each control target of `POST /api/control`; the
/// command line client exposes the same methods.
pub const CONTROL_TARGETS: [(&str, &str); 2] = [("dataset", method::CONTROL_DATASET), ("job", method::CONTROL_JOB)];

pub struct Sessions {
    ttl: Duration,
    live: Mutex<HashMap<String, (Principal, Instant)>>,
}

impl Sessions {
    pub fn new(ttl: Duration) -> Self {
        Sessions {
            ttl,
            live: Mutex::new(HashMap::new()),
        }
    }

    pub fn open(&self, who: Principal) -> String {
        let mut raw = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut raw);
        let token = hex::encode(raw);
        let mut live = self.live.lock().unwrap_or_else(|p| p.into_inner());
        let now = Instant::now();
        live.retain(|_, (_, exp)| *exp > now);
        live.insert(token.clone(), (who, now + self.ttl));
        token
    }

    pub fn get(&self, token: &str) -> Option<Principal> {
        let live = self.live.lock().unwrap_or_else(|p| p.into_inner());
        live.get(token).filter(|(_, exp)| *exp > Instant::now()).map(|(p, _)| p.clone())
    }

    pub fn close(&self, token: &str) {
        self.live.lock().unwrap_or_else(|p| p.into_inner()).remove(token);
    }
}

fn error(status: u16, message: &str) -> HttpResponse {
    HttpResponse::json(status, &json!({ "error": message }))
}

fn fault_response(f: Fault) -> HttpResponse {
    let status = match f.code {
        401 | 403 | 404 | 409 | 422 | 503 => f.code as u16,
        400 => 400,
        _ => 500,
    };
    error(status, &f.message)
}

fn query_filters(query: &str) -> BTreeMap<String, String> {
    form_urlencoded::parse(query.as_bytes()).into_owned().collect()
}

fn rows(state: &ServerState, view: View, filters: &BTreeMap<String, String>) -> HttpResponse {
    match state.db.query_view(view, filters) {
        Ok(rows) => HttpResponse::json(200, &json!(rows)),
        Err(e) => fault_response(e.into()),
    }
}

fn login(state: &ServerState, req: &HttpRequest) -> HttpResponse {
    let body: Json = match serde_json::from_slice(&req.body) {
        Ok(b) => b,
        Err(_) => return error(400, "expected a JSON body"),
    };
    let (Some(user), Some(secret)) = (body["user"].as_str(), body["secret"].as_str()) else {
        return error(400, "user and secret are required");
    };
    match state.authenticate(&UserCredential::new(user, secret)) {
        Ok(who) => {
            let role = json!(who.role);
            let token = state.sessions.open(who);
            HttpResponse::json(200, &json!({ "user": user, "role": role })).with_header(
                "Set-Cookie",
                &format!("{SESSION_COOKIE}={token}; Path=/api; HttpOnly; SameSite=Strict"),
            )
        }
        Err(f) => fault_response(f),
    }
}

fn control(state: &ServerState, who: &Principal, req: &HttpRequest) -> HttpResponse {
    if let Err(e) = who.require_operator() {
        return fault_response(e.into());
    }
    let body: Json = match serde_json::from_slice(&req.body) {
        Ok(b) => b,
        Err(_) => return error(400, "expected a JSON body"),
    };
    let action: ControlAction = match body["action"].as_str().map(str::parse) {
        Some(Ok(a)) => a,
        _ => return error(422, "action must be suspend, resume or reset"),
    };
    let id = match &body["id"] {
        Json::Number(n) => n.to_string(),
        Json::String(s) => s.clone(),
        _ => return error(422, "id is required"),
    };
    let result: Result<Json, DatastoreError> = match body["target"].as_str() {
        Some("dataset") => match id.parse::<i64>() {
            Ok(ds) => state
                .db
                .control_dataset(ds, action)
                .map(|(changed, skipped)| json!({ "changed": changed, "skipped": skipped })),
            Err(_) => return error(422, "dataset id must be an integer"),
        },
        Some("job") => match id.parse::<UnitKey>() {
            Ok(key) => state.db.control(&key, action).map(|s| json!({ "state": s.as_str() })),
            Err(e) => return error(422, &e),
        },
        _ => return error(422, "target must be dataset or job"),
    };
    tracing::info!(user = %who.user, target = ?body["target"], %id, action = action.as_str(), "web control");
    match result {
        Ok(v) => HttpResponse::json(200, &v),
        Err(e) => fault_response(e.into()),
    }
}

fn job_detail(state: &ServerState, key: &str) -> HttpResponse {
    let key: UnitKey = match key.parse() {
        Ok(k) => k,
        Err(e) => return error(422, &e),
    };
    let detail = || -> Result<Option<Json>, DatastoreError> {
        let Some(u) = state.db.unit(&key)? else { return Ok(None) };
        let stats = state.db.unit_stats(&key)?;
        let outputs = state.db.outputs(&key)?;
        Ok(Some(json!({
            "unit": unit_value(&u).to_json(),
            "stats": stats,
            "outputs": outputs,
        })))
    };
    match detail() {
        Ok(Some(v)) => HttpResponse::json(200, &v),
        Ok(None) => error(404, "no such job"),
        Err(e) => fault_response(e.into()),
    }
}

pub fn route(state: &ServerState, req: &HttpRequest) -> HttpResponse {
    let path = req.path.trim_end_matches('/');
    let m = req.method.as_str();
    if path == "/api/login" {
        return if m == "POST" { login(state, req) } else { error(405, "use POST") };
    }
    let token = req.cookie(SESSION_COOKIE);
    let Some(who) = token.and_then(|t| state.sessions.get(t)) else {
        return error(401, "login required");
    };
    let parts: Vec<&str> = path.trim_start_matches("/api").split('/').filter(|s| !s.is_empty()).collect();
    match (m, parts.as_slice()) {
        ("POST", ["logout"]) => {
            if let Some(t) = token {
                state.sessions.close(t);
            }
            HttpResponse::json(200, &json!({ "ok": true }))
                .with_header("Set-Cookie", &format!("{SESSION_COOKIE}=; Path=/api; Max-Age=0"))
        }
        ("GET", ["datasets"]) => rows(state, View::General, &query_filters(&req.query)),
        ("GET", ["datasets", id, "jobs"]) => {
            let mut f = query_filters(&req.query);
            f.insert("dataset_id".into(), id.to_string());
            rows(state, View::Dataset, &f)
        }
        ("GET", ["jobs", rest @ ..]) if !rest.is_empty() => job_detail(state, &rest.join("/")),
        ("POST", ["control"]) => control(state, &who, req),
        _ => error(404, "not found"),
    }
}
