//! The `prodkit` command line client.
//!
//! Exit codes: 0 success, 1 the server refused the request, 2 usage
//! error, 3 the server could not be reached or rejected the credentials.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::lifecycle::UnitKey;
use crate::rpc::auth::UserCredential;
use crate::rpc::{method, record, Client, ClientError, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAULT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_UNREACHABLE: i32 = 3;

/// Which RPC method each command uses.
pub const COMMANDS: &[(&str, &str)] = &[
    ("submit", method::SUBMIT_DATASET),
    ("enqueue", method::ENQUEUE_UNMONITORED),
    ("download", method::GET_STEERING),
    ("status", method::QUERY_VIEW),
    ("stats", method::DATASET_STATS),
    ("suspend", method::CONTROL_DATASET),
    ("suspend", method::CONTROL_JOB),
    ("resume", method::CONTROL_DATASET),
    ("resume", method::CONTROL_JOB),
    ("reset", method::CONTROL_DATASET),
    ("reset", method::CONTROL_JOB),
    ("site", method::SERVER_ADMIN),
    ("version", method::SERVER_ADMIN),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "prodkit", about = "Submit and control production datasets")]
pub struct Cli {
    /// Monitor base URL.
    #[arg(long, env = "PRODKIT_SERVER")]
    server: Option<String>,
    #[arg(long, env = "PRODKIT_USER")]
    user: Option<String>,
    /// Client settings file with a [client] section (server, user).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Submit a steering document; prints the new dataset id.
    Submit { file: PathBuf },
    /// Run one job of a document directly on the server's local backend.
    Enqueue {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        job: u64,
    },
    /// Print a dataset's steering document.
    Download {
        dataset: i64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Datasets, one dataset's jobs, or one job.
    Status {
        /// A dataset id or a job key (`dataset.job[/task]`).
        target: Option<String>,
        #[arg(long)]
        state: Option<String>,
    },
    /// Aggregated statistics of a dataset.
    Stats { dataset: i64 },
    Suspend { target: String },
    Resume { target: String },
    Reset { target: String },
    #[command(subcommand)]
    Site(SiteCommand),
    /// Server protocol version.
    Version,
    /// Read commands from standard input, one per line.
    Shell,
}

#[derive(Debug, Subcommand)]
enum SiteCommand {
    List,
    Add {
        site_id: String,
        #[arg(long, default_value = "local")]
        plugin: String,
        #[arg(long)]
        max_queued: u32,
        #[arg(long)]
        gpu: bool,
        #[arg(long, default_value_t = 0)]
        memory_mb: u64,
        #[arg(long, default_value_t = 0)]
        disk_mb: u64,
        #[arg(long, default_value_t = 0)]
        walltime_s: u64,
    },
    Remove { site_id: String },
    Start { site_id: String },
    Stop { site_id: String },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Client(ClientError::Fault(f)) if f.is_auth() && f.code == crate::rpc::code::AUTH => EXIT_UNREACHABLE,
            CliError::Client(ClientError::Fault(_)) => EXIT_FAULT,
            CliError::Client(_) => EXIT_UNREACHABLE,
        }
    }
}

struct Session {
    client: Client,
    format: Format,
}

fn read_file(p: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
}

fn render_text(v: &Value, out: &mut String, indent: usize) {
    let pad = " ".repeat(indent);
    match v {
        Value::Array(items) => {
            for item in items {
                if let Value::Struct(m) = item {
                    let line: Vec<String> = m.iter().map(|(k, v)| format!("{k}={}", scalar(v))).collect();
                    out.push_str(&format!("{pad}{}\n", line.join(" ")));
                } else {
                    out.push_str(&format!("{pad}{}\n", scalar(item)));
                }
            }
        }
        Value::Struct(m) => {
            for (k, v) in m {
                match v {
                    Value::Struct(_) | Value::Array(_) => {
                        out.push_str(&format!("{pad}{k}:\n"));
                        render_text(v, out, indent + 2);
                    }
                    _ => out.push_str(&format!("{pad}{k}: {}\n", scalar(v))),
                }
            }
        }
        other => out.push_str(&format!("{pad}{}\n", scalar(other))),
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Str(s) => s.clone(),
        Value::Int(n) => n.to_string(),
        Value::Float(f) => crate::expr::render_float(*f),
        Value::Bool(b) => b.to_string(),
        other => other.to_json().to_string(),
    }
}

impl Session {
    fn print(&self, v: &Value, out: &mut dyn Write) {
        let text = match self.format {
            Format::Json => format!("{}\n", serde_json::to_string_pretty(&v.to_json()).unwrap_or_default()),
            Format::Text => {
                let mut s = String::new();
                render_text(v, &mut s, 0);
                s
            }
        };
        let _ = out.write_all(text.as_bytes());
    }

    fn control(&self, target: &str, action: &str) -> Result<Value, CliError> {
        if target.contains('.') {
            target.parse::<UnitKey>().map_err(CliError::Usage)?;
            Ok(self.client.call(method::CONTROL_JOB, &[target.into(), action.into()])?)
        } else {
            let id: i64 = target
                .parse()
                .map_err(|_| CliError::Usage(format!("{target:?} is neither a dataset id nor a job key")))?;
            Ok(self.client.call(method::CONTROL_DATASET, &[id.into(), action.into()])?)
        }
    }

    fn admin(&self, command: &str, args: Value) -> Result<Value, CliError> {
        Ok(self.client.call(method::SERVER_ADMIN, &[command.into(), args])?)
    }

    fn execute(&self, cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
        let v = match cmd {
            Command::Submit { file } => self.client.call(method::SUBMIT_DATASET, &[read_file(&file)?.into()])?,
            Command::Enqueue { file, job } => self
                .client
                .call(method::ENQUEUE_UNMONITORED, &[read_file(&file)?.into(), job.into()])?,
            Command::Download { dataset, output } => {
                let r = self.client.call(method::GET_STEERING, &[dataset.into()])?;
                let xml = r.get("steering").and_then(Value::as_str).unwrap_or_default().to_string();
                match output {
                    Some(p) => {
                        std::fs::write(&p, xml).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                        return Ok(());
                    }
                    None => {
                        let _ = out.write_all(xml.as_bytes());
                        return Ok(());
                    }
                }
            }
            Command::Status { target, state } => {
                let mut filters = BTreeMap::new();
                if let Some(s) = state {
                    filters.insert("status".to_string(), Value::Str(s));
                }
                let view = match &target {
                    None => "general",
                    Some(t) if t.contains('.') => {
                        filters.insert("key".into(), Value::Str(t.clone()));
                        "job"
                    }
                    Some(t) => {
                        filters.insert("dataset_id".into(), Value::Str(t.clone()));
                        "dataset"
                    }
                };
                self.client.call(method::QUERY_VIEW, &[view.into(), Value::Struct(filters)])?
            }
            Command::Stats { dataset } => self.client.call(method::DATASET_STATS, &[dataset.into()])?,
            Command::Suspend { target } => self.control(&target, "suspend")?,
            Command::Resume { target } => self.control(&target, "resume")?,
            Command::Reset { target } => self.control(&target, "reset")?,
            Command::Site(s) => match s {
                SiteCommand::List => self.admin("sites", Value::Struct(BTreeMap::new()))?,
                SiteCommand::Add {
                    site_id,
                    plugin,
                    max_queued,
                    gpu,
                    memory_mb,
                    disk_mb,
                    walltime_s,
                } => self.admin(
                    "site_add",
                    record([
                        ("site_id", site_id.into()),
                        ("plugin", plugin.into()),
                        ("max_queued", max_queued.into()),
                        ("gpu", gpu.into()),
                        ("memory_mb", memory_mb.into()),
                        ("disk_mb", disk_mb.into()),
                        ("walltime_s", walltime_s.into()),
                    ]),
                )?,
                SiteCommand::Remove { site_id } => self.admin("site_remove", record([("site_id", site_id.into())]))?,
                SiteCommand::Start { site_id } => self.admin("site_start", record([("site_id", site_id.into())]))?,
                SiteCommand::Stop { site_id } => self.admin("site_stop", record([("site_id", site_id.into())]))?,
            },
            Command::Version => self.admin("version", Value::Struct(BTreeMap::new()))?,
            Command::Shell => return self.shell(out),
        };
        self.print(&v, out);
        Ok(())
    }

    fn shell(&self, out: &mut dyn Write) -> Result<(), CliError> {
        let stdin = std::io::stdin();
        for line in stdin.lock().lines() {
            let Ok(line) = line else { break };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if matches!(line, "quit" | "exit") {
                break;
            }
            let words = std::iter::once("prodkit").chain(line.split_whitespace());
            match Cli::try_parse_from(words) {
                Ok(Cli { command: Command::Shell, .. }) => {}
                Ok(c) => {
                    if let Err(e) = self.execute(c.command, out) {
                        let _ = writeln!(out, "error: {e}");
                    }
                }
                Err(e) => {
                    let _ = writeln!(out, "{}", e.render());
                }
            }
        }
        Ok(())
    }
}

fn client_settings(path: &PathBuf) -> Result<BTreeMap<String, String>, CliError> {
    let ini = ini::Ini::load_from_file(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(ini
        .section(Some("client"))
        .map(|s| s.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
        .unwrap_or_default())
}

/// Runs the client with `args` (including the program name) and returns
/// the process exit code. The secret comes from `PRODKIT_SECRET`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if code == EXIT_OK {
                let _ = write!(out, "{}", e.render());
            } else {
                let _ = write!(err, "{}", e.render());
            }
            return code;
        }
    };
    match run_cli(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "prodkit: {e}");
            e.exit_code()
        }
    }
}

fn run_cli(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => client_settings(p)?,
        None => BTreeMap::new(),
    };
    let server = cli
        .server
        .or_else(|| file.get("server").cloned())
        .ok_or_else(|| CliError::Usage("no server given (--server or PRODKIT_SERVER)".into()))?;
    let mut client = Client::new(&server);
    if let Some(user) = cli.user.or_else(|| file.get("user").cloned()) {
        let secret = std::env::var("PRODKIT_SECRET").unwrap_or_default();
        client = client.with_user(&UserCredential::new(&user, &secret));
    }
    let session = Session {
        client,
        format: cli.format,
    };
    session.execute(cli.command, out)
}
