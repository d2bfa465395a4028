use std::io::Read;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::Engine;

use super::auth::UserCredential;
use super::codec::{self, Encoding};
use super::{code, Fault, Request, RequestAuth, Value, PROTOCOL_VERSION};

const MAX_BODY: u64 = 32 << 20;
pub const DEFAULT_WORKERS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {message}")]
    BindFailure { addr: String, message: String },
}

/// A plain HTTP request, for routes other than `/rpc` and `/ping`.
#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub method: String,
    pub path: String,
    pub query: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn cookie(&self, name: &str) -> Option<&str> {
        self.header("cookie")?.split(';').find_map(|kv| {
            let (k, v) = kv.trim().split_once('=')?;
            (k == name).then_some(v)
        })
    }
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub content_type: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn json(status: u16, body: &serde_json::Value) -> Self {
        HttpResponse {
            status,
            content_type: "application/json".into(),
            headers: Vec::new(),
            body: body.to_string().into_bytes(),
        }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_string(), value.to_string()));
        self
    }
}

/// What the server runs for each request. Implementations are called
/// from many threads at once.
pub trait Service: Send + Sync + 'static {
    fn call(&self, req: &Request) -> Result<Value, Fault>;

    /// Routes outside `/rpc` and `/ping`; `None` means 404.
    fn http(&self, _req: &HttpRequest) -> Option<HttpResponse> {
        None
    }
}

impl<S: Service + ?Sized> Service for Arc<S> {
    fn call(&self, req: &Request) -> Result<Value, Fault> {
        (**self).call(req)
    }

    fn http(&self, req: &HttpRequest) -> Option<HttpResponse> {
        (**self).http(req)
    }
}

/// A running server; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves with a pool of
/// worker threads.
pub fn serve<S: Service>(addr: &str, service: S, workers: usize) -> Result<ServerHandle, ServerError> {
    let server = tiny_http::Server::http(addr).map_err(|e| ServerError::BindFailure {
        addr: addr.to_string(),
        message: e.to_string(),
    })?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| ServerError::BindFailure {
            addr: addr.to_string(),
            message: "not an IP listener".into(),
        })?;
    let server = Arc::new(server);
    let service = Arc::new(service);
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..workers.max(1))
        .map(|i| {
            let (server, service, stop) = (server.clone(), service.clone(), stop.clone());
            std::thread::Builder::new()
                .name(format!("rpc-{i}"))
                .spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match server.recv() {
                            Ok(req) => handle(service.as_ref(), req),
                            Err(_) => break,
                        }
                    }
                })
                .expect("spawn rpc worker")
        })
        .collect();
    tracing::info!(%bound, "rpc server listening");
    Ok(ServerHandle {
        addr: bound,
        server,
        stop,
        workers,
    })
}

fn header_value(req: &tiny_http::Request, name: &str) -> Option<String> {
    req.headers()
        .iter()
        .find(|h| h.field.as_str().as_str().eq_ignore_ascii_case(name))
        .map(|h| h.value.as_str().to_string())
}

/// Reads `Authorization: Basic` or `X-Passkey`.
pub fn request_auth(authorization: Option<&str>, passkey: Option<&str>) -> RequestAuth {
    if let Some(basic) = authorization.and_then(|a| a.strip_prefix("Basic ")) {
        let decoded = base64::engine::general_purpose::STANDARD
            .decode(basic.trim())
            .ok()
            .and_then(|b| String::from_utf8(b).ok());
        if let Some((user, secret)) = decoded.as_deref().and_then(|d| d.split_once(':')) {
            return RequestAuth::User(UserCredential::new(user, secret));
        }
    }
    match passkey {
        Some(k) if !k.trim().is_empty() => RequestAuth::Passkey(k.trim().to_string()),
        _ => RequestAuth::None,
    }
}

fn respond(req: tiny_http::Request, status: u16, content_type: &str, extra: &[(String, String)], body: Vec<u8>) {
    let mut resp = tiny_http::Response::from_data(body).with_status_code(status);
    let headers = std::iter::once(("Content-Type".to_string(), content_type.to_string())).chain(extra.iter().cloned());
    for (k, v) in headers {
        if let Ok(h) = tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()) {
            resp.add_header(h);
        }
    }
    let _ = req.respond(resp);
}

fn handle(service: &dyn Service, mut req: tiny_http::Request) {
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((url.as_str(), ""));
    let (path, query) = (path.to_string(), query.to_string());
    let mut body = Vec::new();
    if req.as_reader().take(MAX_BODY).read_to_end(&mut body).is_err() {
        return respond(req, 400, "text/plain", &[], b"unreadable body".to_vec());
    }
    let verb = req.method().as_str().to_string();

    if path == "/ping" {
        return respond(req, 200, "text/plain", &[], PROTOCOL_VERSION.as_bytes().to_vec());
    }
    if path == "/rpc" && verb == "POST" {
        let enc = Encoding::from_content_type(header_value(&req, "content-type").as_deref());
        let auth = request_auth(
            header_value(&req, "authorization").as_deref(),
            header_value(&req, "x-passkey").as_deref(),
        );
        let result = decode_request(enc, &body).and_then(|(method, params)| {
            let r = Request { method, params, auth };
            let out = service.call(&r);
            match &out {
                Ok(_) => tracing::debug!(method = %r.method, "rpc ok"),
                Err(f) => tracing::debug!(method = %r.method, code = f.code, "rpc fault"),
            }
            out
        });
        let text = match enc {
            Encoding::Xml => codec::encode_response(&result),
            Encoding::Json => codec::encode_response_json(&result),
        };
        return respond(req, 200, enc.content_type(), &[], text.into_bytes());
    }

    let headers = req
        .headers()
        .iter()
        .map(|h| (h.field.as_str().as_str().to_string(), h.value.as_str().to_string()))
        .collect();
    let hreq = HttpRequest {
        method: verb,
        path,
        query,
        headers,
        body,
    };
    match service.http(&hreq) {
        Some(r) => respond(req, r.status, &r.content_type, &r.headers, r.body),
        None => respond(req, 404, "text/plain", &[], b"not found".to_vec()),
    }
}

fn decode_request(enc: Encoding, body: &[u8]) -> Result<(String, Vec<Value>), Fault> {
    let text = std::str::from_utf8(body).map_err(|_| Fault::new(code::DECODE, "body is not UTF-8"))?;
    match enc {
        Encoding::Xml => codec::decode_call(text),
        Encoding::Json => codec::decode_call_json(text),
    }
    .map_err(|e| Fault::new(code::DECODE, e.to_string()))
}
