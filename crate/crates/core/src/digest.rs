//! MD5 digests for integrity checks.

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use md5::{Digest, Md5};

use crate::par::Exec;

pub fn md5_hex(bytes: &[u8]) -> String {
    hex::encode(Md5::digest(bytes))
}

/// Digest of everything `reader` yields.
pub fn md5_reader<R: Read>(mut reader: R) -> io::Result<String> {
    let mut hasher = Md5::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn md5_file(path: &Path) -> io::Result<String> {
    md5_reader(File::open(path)?)
}

/// Digests of many files, in input order.
pub fn md5_files(paths: &[PathBuf], exec: Exec) -> Vec<io::Result<String>> {
    exec.map(paths, |p| md5_file(p))
}
