use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::time::Duration;

use super::{io_err, opt, req, IpModule, ModuleContext, ModuleError, ParamSpec, Params, Result};
use crate::datastore::{OutputRecord, StatMap};
use crate::digest::md5_file;
use crate::steering::ParamType::{Bool, Float, Int, ListString, String as Str};

pub const BUILTIN_CLASSES: [&str; 8] = [
    "noop",
    "sleep",
    "transfer",
    "tarball",
    "checksum",
    "file-concatenate",
    "event-counter",
    "write-text",
];

pub(super) fn builtin(class: &str) -> Option<Box<dyn IpModule>> {
    Some(match class {
        "noop" => Box::new(Noop),
        "sleep" => Box::new(Sleep),
        "transfer" => Box::new(Transfer),
        "tarball" => Box::new(Tarball),
        "checksum" => Box::new(Checksum),
        "file-concatenate" => Box::new(Concatenate),
        "event-counter" => Box::new(EventCounter),
        "write-text" => Box::new(WriteText),
        _ => return None,
    })
}

fn failed(module: &str, message: impl Into<String>) -> ModuleError {
    ModuleError::Failed {
        module: module.to_string(),
        message: message.into(),
    }
}

struct Noop;

impl IpModule for Noop {
    fn schema(&self) -> &[ParamSpec] {
        &[]
    }

    fn execute(&self, _: &str, _: &Params, _: &mut ModuleContext, _: &mut StatMap) -> Result<()> {
        Ok(())
    }
}

/// `seconds`: how long to sleep.
struct Sleep;

impl IpModule for Sleep {
    fn schema(&self) -> &[ParamSpec] {
        const S: &[ParamSpec] = &[req("seconds", Float)];
        S
    }

    fn execute(&self, name: &str, p: &Params, _: &mut ModuleContext, _: &mut StatMap) -> Result<()> {
        let s = p.float("seconds").unwrap_or(0.0);
        if !(0.0..=86_400.0).contains(&s) {
            return Err(failed(name, format!("cannot sleep {s} s")));
        }
        std::thread::sleep(Duration::from_secs_f64(s));
        Ok(())
    }
}

/// Copies between scratch and storage.
///
/// * `upload`: `src` is a scratch path, `dst` a location. The digest is
///   recorded and the file becomes a job output.
/// * `download`: `src` is a location, `dst` a scratch path. The copy must
///   match the recorded digest unless `verify` is false.
struct Transfer;

impl IpModule for Transfer {
    fn schema(&self) -> &[ParamSpec] {
        const S: &[ParamSpec] = &[req("src", Str), req("dst", Str), req("direction", Str), opt("verify", Bool)];
        S
    }

    fn execute(&self, name: &str, p: &Params, ctx: &mut ModuleContext, stats: &mut StatMap) -> Result<()> {
        let (src, dst) = (p.str("src").unwrap_or_default(), p.str("dst").unwrap_or_default());
        match p.str("direction").unwrap_or_default() {
            "upload" => {
                let local = ctx.confined(name, src)?;
                let url = ctx.location(name, dst)?;
                let md5 = md5_file(&local).map_err(io_err(&local))?;
                let size = ctx.storage.put(&local, &url)?;
                ctx.registry.insert(url.clone(), md5.clone());
                ctx.outputs.retain(|o| o.url != url);
                ctx.outputs.push(OutputRecord {
                    name: dst.to_string(),
                    url,
                    md5,
                    size,
                });
                stats.insert(format!("{name}.bytes"), size as f64);
                Ok(())
            }
            "download" => {
                let url = ctx.location(name, src)?;
                let local = ctx.confined(name, dst)?;
                let size = ctx.storage.get(&url, &local)?;
                if p.bool("verify").unwrap_or(true) {
                    let expected = ctx.registry.get(&url).cloned().ok_or_else(|| {
                        failed(name, format!("no recorded digest for {url}"))
                    })?;
                    let actual = md5_file(&local).map_err(io_err(&local))?;
                    if actual != expected {
                        let _ = fs::remove_file(&local);
                        return Err(ModuleError::DigestMismatch { url, expected, actual });
                    }
                }
                stats.insert(format!("{name}.bytes"), size as f64);
                Ok(())
            }
            other => Err(ModuleError::ParamValidation {
                module: name.to_string(),
                message: format!("direction must be upload or download, not {other:?}"),
            }),
        }
    }
}

/// `mode` pack: `dir` → `archive`; unpack: `archive` → `dir`.
struct Tarball;

impl IpModule for Tarball {
    fn schema(&self) -> &[ParamSpec] {
        const S: &[ParamSpec] = &[req("mode", Str), req("archive", Str), req("dir", Str)];
        S
    }

    fn execute(&self, name: &str, p: &Params, ctx: &mut ModuleContext, stats: &mut StatMap) -> Result<()> {
        let archive = ctx.confined(name, p.str("archive").unwrap_or_default())?;
        let dir = ctx.confined(name, p.str("dir").unwrap_or_default())?;
        match p.str("mode").unwrap_or_default() {
            "pack" => {
                let f = fs::File::create(&archive).map_err(io_err(&archive))?;
                let mut b = tar::Builder::new(f);
                b.mode(tar::HeaderMode::Deterministic);
                b.follow_symlinks(false);
                b.append_dir_all(".", &dir).map_err(io_err(&dir))?;
                b.into_inner().and_then(|mut f| f.flush()).map_err(io_err(&archive))?;
                let len = fs::metadata(&archive).map(|m| m.len()).unwrap_or(0);
                stats.insert(format!("{name}.bytes"), len as f64);
                Ok(())
            }
            "unpack" => {
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let f = fs::File::open(&archive).map_err(io_err(&archive))?;
                let mut a = tar::Archive::new(f);
                // entries with absolute or parent paths are refused
                for entry in a.entries().map_err(io_err(&archive))? {
                    let mut entry = entry.map_err(io_err(&archive))?;
                    if !entry.unpack_in(&dir).map_err(io_err(&dir))? {
                        return Err(ModuleError::Confinement {
                            module: name.to_string(),
                            path: entry.path().map(|p| p.display().to_string()).unwrap_or_default(),
                        });
                    }
                }
                Ok(())
            }
            other => Err(ModuleError::ParamValidation {
                module: name.to_string(),
                message: format!("mode must be pack or unpack, not {other:?}"),
            }),
        }
    }
}

/// Computes the MD5 of `file`, optionally checking it against `expect`
/// and writing it to `output`.
struct Checksum;

impl IpModule for Checksum {
    fn schema(&self) -> &[ParamSpec] {
        const S: &[ParamSpec] = &[req("file", Str), opt("expect", Str), opt("output", Str)];
        S
    }

    fn execute(&self, name: &str, p: &Params, ctx: &mut ModuleContext, _: &mut StatMap) -> Result<()> {
        let file = ctx.confined(name, p.str("file").unwrap_or_default())?;
        let md5 = md5_file(&file).map_err(io_err(&file))?;
        if let Some(expect) = p.str("expect") {
            if !expect.trim().eq_ignore_ascii_case(&md5) {
                return Err(ModuleError::DigestMismatch {
                    url: file.display().to_string(),
                    expected: expect.trim().to_ascii_lowercase(),
                    actual: md5,
                });
            }
        }
        if let Some(out) = p.str("output") {
            let out = ctx.confined(name, out)?;
            fs::write(&out, format!("{md5}\n")).map_err(io_err(&out))?;
        }
        Ok(())
    }
}

/// Concatenates `inputs` in order into `output`.
struct Concatenate;

impl IpModule for Concatenate {
    fn schema(&self) -> &[ParamSpec] {
        const S: &[ParamSpec] = &[req("inputs", ListString), req("output", Str)];
        S
    }

    fn execute(&self, name: &str, p: &Params, ctx: &mut ModuleContext, stats: &mut StatMap) -> Result<()> {
        let out = ctx.confined(name, p.str("output").unwrap_or_default())?;
        let inputs = p
            .list("inputs")
            .unwrap_or_default()
            .iter()
            .map(|i| ctx.confined(name, i))
            .collect::<Result<Vec<_>>>()?;
        let mut w = fs::File::create(&out).map_err(io_err(&out))?;
        let mut total = 0u64;
        for i in &inputs {
            let mut r = fs::File::open(i).map_err(io_err(i))?;
            total += std::io::copy(&mut r, &mut w).map_err(io_err(&out))?;
        }
        stats.insert(format!("{name}.bytes"), total as f64);
        Ok(())
    }
}

/// Adds `count`, or the number of lines in `file`, to the statistic
/// `stat` (default `events`).
struct EventCounter;

impl IpModule for EventCounter {
    fn schema(&self) -> &[ParamSpec] {
        const S: &[ParamSpec] = &[opt("file", Str), opt("count", Int), opt("stat", Str)];
        S
    }

    fn execute(&self, name: &str, p: &Params, ctx: &mut ModuleContext, stats: &mut StatMap) -> Result<()> {
        let n = match (p.str("file"), p.int("count")) {
            (Some(f), None) => {
                let f = ctx.confined(name, f)?;
                let r = BufReader::new(fs::File::open(&f).map_err(io_err(&f))?);
                let mut lines = 0u64;
                for l in r.lines() {
                    l.map_err(io_err(&f))?;
                    lines += 1;
                }
                lines as f64
            }
            (None, Some(c)) => c as f64,
            _ => {
                return Err(ModuleError::ParamValidation {
                    module: name.to_string(),
                    message: "exactly one of file and count is required".into(),
                })
            }
        };
        let stat = p.str("stat").unwrap_or("events");
        *stats.entry(stat.to_string()).or_insert(0.0) += n;
        Ok(())
    }
}

/// Writes `text` (`repeat` times, one per line) to `path`.
struct WriteText;

impl IpModule for WriteText {
    fn schema(&self) -> &[ParamSpec] {
        const S: &[ParamSpec] = &[req("path", Str), req("text", Str), opt("repeat", Int)];
        S
    }

    fn execute(&self, name: &str, p: &Params, ctx: &mut ModuleContext, _: &mut StatMap) -> Result<()> {
        let path = ctx.confined(name, p.str("path").unwrap_or_default())?;
        let repeat = p.int("repeat").unwrap_or(1);
        if !(0..=10_000_000).contains(&repeat) {
            return Err(failed(name, format!("repeat {repeat} out of range")));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut w = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        let text = p.str("text").unwrap_or_default();
        for _ in 0..repeat {
            writeln!(w, "{text}").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))
    }
}
