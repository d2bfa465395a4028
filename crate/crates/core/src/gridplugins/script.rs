//! The submission script dialect.
//!
//! Resource requests are `#DIRECTIVE key=value` header lines, one per
//! request, in a fixed order:
//!
//! ```text
//! #!/bin/sh
//! #DIRECTIVE name=pk-site-12.3
//! #DIRECTIVE queue=short
//! #DIRECTIVE mem=2048mb
//! #DIRECTIVE disk=500mb
//! #DIRECTIVE walltime=01:00:00
//! #DIRECTIVE gpus=1
//! #DIRECTIVE stdout=/spool/pk-site-12.3.out
//! #DIRECTIVE stderr=/spool/pk-site-12.3.err
//! export OMP_NUM_THREADS='1'
//! exec 'prodkit-pilot' --dataset 12 --job 3 --key ... --monitor http://...
//! ```
//!
//! `queue` and `account` come from the site options; `mem`, `disk` and
//! `gpus` appear only when requested. Output depends only on the inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{io_err, Artifacts, JobMaterialization, PluginError, Result};
use crate::config::SiteConfig;
use crate::steering::is_identifier;

/// `3600` → `01:00:00`; hours are not capped at 24.
pub fn format_walltime(seconds: u64) -> String {
    format!("{:02}:{:02}:{:02}", seconds / 3600, seconds / 60 % 60, seconds % 60)
}

/// Single-quotes `s` for sh.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

pub fn render(job: &JobMaterialization, site: &SiteConfig, submit_name: &str, out_dir: &Path) -> Result<String> {
    let req = &job.requirements;
    let mut s = String::from("#!/bin/sh\n");
    let mut d = |k: &str, v: &dyn std::fmt::Display| {
        let _ = writeln!(s, "#DIRECTIVE {k}={v}");
    };
    d("name", &submit_name);
    for opt in ["queue", "account"] {
        if let Some(v) = site.option(opt) {
            d(opt, &v);
        }
    }
    if req.min_memory_mb > 0 {
        d("mem", &format!("{}mb", req.min_memory_mb));
    }
    if req.min_disk_mb > 0 {
        d("disk", &format!("{}mb", req.min_disk_mb));
    }
    d("walltime", &format_walltime(req.max_walltime_s));
    if req.needs_gpu {
        d("gpus", &1);
    }
    d("stdout", &out_dir.join(format!("{submit_name}.out")).display());
    d("stderr", &out_dir.join(format!("{submit_name}.err")).display());

    for (k, v) in &site.job_env {
        if !is_identifier(k) {
            return Err(PluginError::BadEnvironment(k.clone()));
        }
        let _ = writeln!(s, "export {k}={}", shell_quote(v));
    }

    let pilot = site.system_params.get("pilot").map(String::as_str).unwrap_or("prodkit-pilot");
    let _ = write!(
        s,
        "exec {} --dataset {} --job {}",
        shell_quote(pilot),
        job.key.dataset_id,
        job.key.job_index
    );
    if let Some(t) = &job.key.task {
        let _ = write!(s, " --task {}", shell_quote(t));
    }
    match &job.steering_file {
        Some(f) => {
            let _ = write!(s, " --steering {}", shell_quote(&f.display().to_string()));
        }
        None => {
            let _ = write!(s, " --key {} --monitor {}", job.passkey, shell_quote(&job.monitor_url));
        }
    }
    for (flag, param) in [("--scratch", "scratch"), ("--cache", "cache")] {
        if let Some(v) = site.system_params.get(param) {
            let _ = write!(s, " {flag} {}", shell_quote(v));
        }
    }
    s.push('\n');
    Ok(s)
}

/// Writes `<out_dir>/<submit_name>.sh`, readable by the owner only since
/// it carries the passkey.
pub fn write(job: &JobMaterialization, site: &SiteConfig, submit_name: &str, out_dir: &Path) -> Result<Artifacts> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let text = render(job, site, submit_name, out_dir)?;
    let path = out_dir.join(format!("{submit_name}.sh"));
    fs::write(&path, text).map_err(io_err(&path))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&path, fs::Permissions::from_mode(0o700)).map_err(io_err(&path))?;
    }
    Ok(Artifacts {
        key: job.key.clone(),
        submit_name: submit_name.to_string(),
        script: path,
    })
}
