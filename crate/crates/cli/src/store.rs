//! File helpers: JSON lines, atomic writes and content hashes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Precondition;

pub fn require_path(key: &str, path: &Path) -> Result<(), Precondition> {
    if path.exists() {
        Ok(())
    } else {
        Err(Precondition::new(key, format!("{} does not exist", path.display())))
    }
}

pub fn open(key: &str, path: &Path) -> Result<BufReader<File>> {
    require_path(key, path)?;
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

pub fn read_jsonl<T: DeserializeOwned>(key: &str, path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(key, path)?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(v);
    }
    Ok(out)
}

fn tmp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp"))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(items)?.as_bytes())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(key: &str, path: &Path) -> Result<T> {
    let r = open(key, path)?;
    serde_json::from_reader(r).with_context(|| format!("parsing {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file, or of every file under a directory (sorted by relative
/// path, names included).
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut buf = vec![0u8; 1 << 16];
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        let full = if rel.as_os_str().is_empty() { path.to_path_buf() } else { path.join(&rel) };
        let mut f = File::open(&full).with_context(|| format!("hashing {}", full.display()))?;
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, at: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = fs::metadata(at).with_context(|| format!("reading {}", at.display()))?;
    if meta.is_file() {
        out.push(at.strip_prefix(root).unwrap_or(at).to_path_buf());
        return Ok(());
    }
    for entry in fs::read_dir(at)? {
        let p = entry?.path();
        let hidden = p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
        if !hidden {
            collect_files(root, &p, out)?;
        }
    }
    Ok(())
}
