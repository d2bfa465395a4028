//! Where job outputs live. Locations are URLs: `file:///abs/path` for a
//! shared filesystem, `http://host/path` for a store accepting PUT.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::rpc::server::{serve, HttpRequest, HttpResponse, ServerError, ServerHandle};
use crate::rpc::{Fault, Request, Service, Value};

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("unsupported location {0:?}")]
    UnsupportedScheme(String),
    #[error("{url}: {source}")]
    Io {
        url: String,
        #[source]
        source: io::Error,
    },
    #[error("{url}: HTTP {status}")]
    Http { url: String, status: u16 },
    #[error("{url}: {message}")]
    Transport { url: String, message: String },
    #[error("{0} does not exist")]
    NotFound(String),
}

pub type Result<T> = std::result::Result<T, StorageError>;

/// One storage backend.
pub trait Transfer: Send + Sync {
    /// Copies a local file to `url`, returning the bytes written.
    fn put(&self, src: &Path, url: &str) -> Result<u64>;
    fn open(&self, url: &str) -> Result<Box<dyn Read + Send>>;
    fn delete(&self, url: &str) -> Result<()>;
    fn exists(&self, url: &str) -> Result<bool>;

    fn get(&self, url: &str, dst: &Path) -> Result<u64> {
        let mut r = self.open(url)?;
        let io_err = |source| StorageError::Io {
            url: url.to_string(),
            source,
        };
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut f = fs::File::create(dst).map_err(io_err)?;
        io::copy(&mut r, &mut f).map_err(io_err)
    }

    /// Moves `url` aside and returns the new location.
    fn quarantine(&self, url: &str) -> Result<String> {
        let target = quarantine_url(url);
        let tmp = tempfile_path();
        self.get(url, &tmp)?;
        let r = self.put(&tmp, &target);
        let _ = fs::remove_file(&tmp);
        r?;
        self.delete(url)?;
        Ok(target)
    }
}

fn tempfile_path() -> PathBuf {
    std::env::temp_dir().join(format!("prodkit-q-{}", crate::rpc::auth::new_passkey()))
}

/// `a/b/out.dat` becomes `a/b/quarantine/out.dat.<nonce>`.
pub fn quarantine_url(url: &str) -> String {
    let (dir, name) = url.rsplit_once('/').unwrap_or(("", url));
    let nonce = &crate::rpc::auth::new_passkey()[..8];
    format!("{dir}/quarantine/{name}.{nonce}")
}

pub fn file_url(path: &Path) -> String {
    format!("file://{}", path.display())
}

/// Joins a base location and a relative name.
pub fn join_url(base: &str, name: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), name.trim_start_matches('/'))
}

pub struct LocalFs;

impl LocalFs {
    fn path(url: &str) -> Result<PathBuf> {
        url.strip_prefix("file://")
            .filter(|p| p.starts_with('/'))
            .map(PathBuf::from)
            .ok_or_else(|| StorageError::UnsupportedScheme(url.to_string()))
    }
}

impl Transfer for LocalFs {
    fn put(&self, src: &Path, url: &str) -> Result<u64> {
        let dst = Self::path(url)?;
        let io_err = |source| StorageError::Io {
            url: url.to_string(),
            source,
        };
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        // write then rename so readers never see a partial file
        let partial = dst.with_extension(format!("part-{}", std::process::id()));
        fs::copy(src, &partial).map_err(io_err)?;
        fs::rename(&partial, &dst).map_err(io_err)?;
        fs::metadata(&dst).map(|m| m.len()).map_err(io_err)
    }

    fn open(&self, url: &str) -> Result<Box<dyn Read + Send>> {
        let p = Self::path(url)?;
        match fs::File::open(&p) {
            Ok(f) => Ok(Box::new(f)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StorageError::NotFound(url.to_string())),
            Err(source) => Err(StorageError::Io {
                url: url.to_string(),
                source,
            }),
        }
    }

    fn delete(&self, url: &str) -> Result<()> {
        match fs::remove_file(Self::path(url)?) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(source) => Err(StorageError::Io {
                url: url.to_string(),
                source,
            }),
        }
    }

    fn exists(&self, url: &str) -> Result<bool> {
        Ok(Self::path(url)?.is_file())
    }

    fn quarantine(&self, url: &str) -> Result<String> {
        let target = quarantine_url(url);
        let (from, to) = (Self::path(url)?, Self::path(&target)?);
        let io_err = |source| StorageError::Io {
            url: url.to_string(),
            source,
        };
        fs::create_dir_all(to.parent().expect("quarantine path has a parent")).map_err(io_err)?;
        fs::rename(from, to).map_err(io_err)?;
        Ok(target)
    }
}

/// A store speaking plain HTTP GET/PUT/DELETE/HEAD.
pub struct HttpStore {
    agent: ureq::Agent,
}

impl Default for HttpStore {
    fn default() -> Self {
        HttpStore {
            agent: ureq::AgentBuilder::new().timeout(std::time::Duration::from_secs(300)).build(),
        }
    }
}

impl HttpStore {
    fn check(url: &str, r: std::result::Result<ureq::Response, ureq::Error>) -> Result<ureq::Response> {
        match r {
            Ok(r) => Ok(r),
            Err(ureq::Error::Status(404, _)) => Err(StorageError::NotFound(url.to_string())),
            Err(ureq::Error::Status(status, _)) => Err(StorageError::Http {
                url: url.to_string(),
                status,
            }),
            Err(e) => Err(StorageError::Transport {
                url: url.to_string(),
                message: e.to_string(),
            }),
        }
    }
}

impl Transfer for HttpStore {
    fn put(&self, src: &Path, url: &str) -> Result<u64> {
        let f = fs::File::open(src).map_err(|source| StorageError::Io {
            url: src.display().to_string(),
            source,
        })?;
        let len = f.metadata().map(|m| m.len()).unwrap_or(0);
        Self::check(url, self.agent.put(url).set("Content-Length", &len.to_string()).send(f))?;
        Ok(len)
    }

    fn open(&self, url: &str) -> Result<Box<dyn Read + Send>> {
        let r = Self::check(url, self.agent.get(url).call())?;
        Ok(Box::new(r.into_reader()))
    }

    fn delete(&self, url: &str) -> Result<()> {
        match Self::check(url, self.agent.delete(url).call()) {
            Ok(_) | Err(StorageError::NotFound(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn exists(&self, url: &str) -> Result<bool> {
        match Self::check(url, self.agent.head(url).call()) {
            Ok(_) => Ok(true),
            Err(StorageError::NotFound(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }
}

/// Picks the backend for a URL.
#[derive(Clone)]
pub struct Storage {
    local: Arc<LocalFs>,
    http: Arc<HttpStore>,
}

impl Default for Storage {
    fn default() -> Self {
        Storage {
            local: Arc::new(LocalFs),
            http: Arc::new(HttpStore::default()),
        }
    }
}

impl Storage {
    pub fn backend(&self, url: &str) -> Result<&dyn Transfer> {
        if url.starts_with("file://") {
            Ok(self.local.as_ref())
        } else if url.starts_with("http://") || url.starts_with("https://") {
            Ok(self.http.as_ref())
        } else {
            Err(StorageError::UnsupportedScheme(url.to_string()))
        }
    }

    pub fn put(&self, src: &Path, url: &str) -> Result<u64> {
        self.backend(url)?.put(src, url)
    }

    pub fn get(&self, url: &str, dst: &Path) -> Result<u64> {
        self.backend(url)?.get(url, dst)
    }

    pub fn open(&self, url: &str) -> Result<Box<dyn Read + Send>> {
        self.backend(url)?.open(url)
    }

    pub fn delete(&self, url: &str) -> Result<()> {
        self.backend(url)?.delete(url)
    }

    pub fn exists(&self, url: &str) -> Result<bool> {
        self.backend(url)?.exists(url)
    }

    pub fn quarantine(&self, url: &str) -> Result<String> {
        self.backend(url)?.quarantine(url)
    }

    /// MD5 of the stored bytes.
    pub fn md5(&self, url: &str) -> Result<String> {
        let r = self.open(url)?;
        crate::digest::md5_reader(r).map_err(|source| StorageError::Io {
            url: url.to_string(),
            source,
        })
    }
}

/// Serves a directory over HTTP GET/PUT/HEAD/DELETE.
pub struct FileServer {
    root: PathBuf,
}

impl FileServer {
    pub fn new(root: &Path) -> Self {
        FileServer { root: root.to_path_buf() }
    }

    pub fn start(self, addr: &str) -> std::result::Result<ServerHandle, ServerError> {
        serve(addr, self, 16)
    }

    fn resolve(&self, path: &str) -> Option<PathBuf> {
        let rel = path.trim_start_matches('/');
        let ok = !rel.is_empty() && rel.split('/').all(|c| !c.is_empty() && c != "." && c != "..");
        ok.then(|| self.root.join(rel))
    }
}

fn plain(status: u16, body: &str) -> HttpResponse {
    HttpResponse {
        status,
        content_type: "text/plain".into(),
        headers: Vec::new(),
        body: body.as_bytes().to_vec(),
    }
}

impl Service for FileServer {
    fn call(&self, req: &Request) -> std::result::Result<Value, Fault> {
        Err(Fault::method_not_found(&req.method))
    }

    fn http(&self, req: &HttpRequest) -> Option<HttpResponse> {
        let Some(p) = self.resolve(&req.path) else {
            return Some(plain(400, "bad path"));
        };
        Some(match req.method.as_str() {
            "GET" | "HEAD" => match fs::read(&p) {
                Ok(body) => HttpResponse {
                    status: 200,
                    content_type: "application/octet-stream".into(),
                    headers: Vec::new(),
                    body: if req.method == "HEAD" { Vec::new() } else { body },
                },
                Err(_) => plain(404, "not found"),
            },
            "PUT" => {
                let partial = p.with_extension("partial");
                let written = p
                    .parent()
                    .map_or(Ok(()), fs::create_dir_all)
                    .and_then(|_| fs::write(&partial, &req.body))
                    .and_then(|_| fs::rename(&partial, &p));
                match written {
                    Ok(()) => plain(201, "stored"),
                    Err(e) => plain(500, &e.to_string()),
                }
            }
            "DELETE" => match fs::remove_file(&p) {
                Ok(()) => plain(204, ""),
                Err(_) => plain(404, "not found"),
            },
            _ => plain(405, "method not allowed"),
        })
    }
}
