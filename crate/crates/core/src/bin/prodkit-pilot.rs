use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use prodkit::pilot::{Pilot, PilotError, PilotOptions};

/// Runs one job or task on a worker node.
#[derive(Debug, Parser)]
#[command(name = "prodkit-pilot")]
struct Args {
    #[arg(long)]
    dataset: i64,
    #[arg(long)]
    job: u64,
    #[arg(long)]
    task: Option<String>,
    /// Passkey of this attempt.
    #[arg(long, env = "PRODKIT_PASSKEY", hide_env_values = true)]
    key: Option<String>,
    /// Monitor base URL.
    #[arg(long)]
    monitor: Option<String>,
    /// Run this steering file without a monitor.
    #[arg(long, conflicts_with_all = ["key", "monitor"])]
    steering: Option<PathBuf>,
    #[arg(long)]
    scratch: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 300.0)]
    keepalive_s: f64,
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let a = Args::parse();
    if a.steering.is_none() && (a.key.is_none() || a.monitor.is_none()) {
        eprintln!("prodkit-pilot: --key and --monitor are required unless --steering is given");
        std::process::exit(2);
    }
    let mut o = PilotOptions::new(a.dataset, a.job);
    o.task = a.task;
    o.passkey = a.key;
    o.monitor = a.monitor;
    o.steering_file = a.steering;
    if let Some(s) = a.scratch {
        o.scratch_root = s;
    }
    if let Some(c) = a.cache {
        o.cache = c;
    }
    if a.keepalive_s.is_finite() && a.keepalive_s > 0.0 {
        o.keepalive = Duration::from_secs_f64(a.keepalive_s);
    }
    let unmonitored = o.steering_file.is_some();
    match Pilot::new(o).run() {
        Ok(summary) => {
            if unmonitored {
                let report = serde_json::json!({ "stats": summary.stats, "outputs": summary.outputs });
                println!("{report}");
            }
        }
        Err(e) => {
            eprintln!("prodkit-pilot: {e}");
            std::process::exit(if matches!(e, PilotError::Withdrawn(_)) { 3 } else { 1 });
        }
    }
}
