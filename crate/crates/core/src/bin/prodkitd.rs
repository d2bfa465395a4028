use std::io::BufRead;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use prodkit::config::Config;
use prodkit::daemons::{Daemon, Roles};
use prodkit::datastore::Datastore;
use prodkit::rpc::auth::{CredentialStore, Role};

#[derive(Debug, Parser)]
#[command(name = "prodkitd", about = "Production server: monitor, queue daemons and housekeeping")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the server until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated parts to run: rpc, housekeeping, dh, site:<id>.
        /// Everything by default.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Add or replace a user. The secret is read from PRODKIT_SECRET or
    /// the first line of standard input.
    Useradd {
        #[arg(long)]
        credentials: PathBuf,
        #[arg(long)]
        user: String,
        #[arg(long, default_value = "readonly")]
        role: String,
    },
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    STOP.store(true, Ordering::SeqCst);
}

fn roles(only: &[String]) -> Result<Roles, String> {
    if only.is_empty() {
        return Ok(Roles::default());
    }
    let mut r = Roles {
        rpc: false,
        sites: Some(Vec::new()),
        housekeeping: false,
        dh: false,
    };
    for part in only {
        match part.as_str() {
            "rpc" => r.rpc = true,
            "housekeeping" => r.housekeeping = true,
            "dh" => r.dh = true,
            p => match p.strip_prefix("site:") {
                Some(id) => r.sites.get_or_insert_with(Vec::new).push(id.to_string()),
                None => return Err(format!("unknown part {p:?}")),
            },
        }
    }
    Ok(r)
}

fn fail(msg: impl std::fmt::Display) -> ! {
    eprintln!("prodkitd: {msg}");
    std::process::exit(1);
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    match Args::parse().command {
        Cmd::Useradd { credentials, user, role } => {
            let role = match role.as_str() {
                "operator" => Role::Operator,
                "readonly" => Role::ReadOnly,
                other => fail(format!("unknown role {other:?}")),
            };
            let secret = match std::env::var("PRODKIT_SECRET") {
                Ok(s) => s,
                Err(_) => {
                    let mut line = String::new();
                    let _ = std::io::stdin().lock().read_line(&mut line);
                    line.trim_end_matches(['\r', '\n']).to_string()
                }
            };
            if secret.is_empty() {
                fail("empty secret");
            }
            let mut store = if credentials.exists() {
                CredentialStore::load(&credentials).unwrap_or_else(|e| fail(e))
            } else {
                CredentialStore::new()
            };
            store.add_user(&user, &secret, role);
            store.save(&credentials).unwrap_or_else(|e| fail(e));
        }
        Cmd::Run { config, only } => {
            let roles = roles(&only).unwrap_or_else(|e| fail(e));
            let cfg = Config::load(&config).unwrap_or_else(|e| fail(e));
            let db = Arc::new(Datastore::open(&cfg.server.database).unwrap_or_else(|e| fail(e)));
            let creds = match &cfg.server.credentials {
                Some(p) => CredentialStore::load(p).unwrap_or_else(|e| fail(e)),
                None => {
                    tracing::warn!("no credentials file configured; all user requests will be refused");
                    CredentialStore::new()
                }
            };
            // SAFETY: the handler only stores to an atomic
            unsafe {
                libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
                libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
            }
            let daemon = Daemon::start(cfg, db, creds, &roles).unwrap_or_else(|e| fail(e));
            if let Some(url) = daemon.url() {
                tracing::info!(%url, "serving");
            }
            let flag = daemon.stop_flag();
            std::thread::spawn(move || {
                while !STOP.load(Ordering::SeqCst) {
                    std::thread::sleep(std::time::Duration::from_millis(200));
                }
                flag.store(true, Ordering::SeqCst);
            });
            daemon.wait();
        }
    }
}
