//! Locating model checkpoints on disk.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use simile_model::Transformer;

use crate::error::Precondition;

/// Directory searched for checkpoints named without a path.
pub const MODEL_CACHE_ENV: &str = "SIMILE_MODEL_CACHE";

pub fn model_cache_dir() -> PathBuf {
    if let Some(dir) = env::var_os(MODEL_CACHE_ENV) {
        return PathBuf::from(dir);
    }
    let home = env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("simile-probe").join("models")
}

fn is_model_dir(p: &Path) -> bool {
    p.join(simile_model::runtime::CONFIG_FILE).is_file()
}

/// Resolves a model given as a directory, as a name under the cache
/// (`bert-base-uncased`, `org/name`, `org--name`) or as a hub-style cache
/// entry (`models--org--name/snapshots/<rev>`).
pub fn resolve_model(spec: &str) -> Result<PathBuf, Precondition> {
    let direct = PathBuf::from(spec);
    if is_model_dir(&direct) {
        return Ok(direct);
    }
    let cache = model_cache_dir();
    let flat = spec.replace('/', "--");
    let mut tried = vec![cache.join(spec), cache.join(&flat)];
    let snapshots = cache.join(format!("models--{flat}")).join("snapshots");
    if let Ok(entries) = fs::read_dir(&snapshots) {
        let mut revs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        revs.sort();
        tried.extend(revs);
    }
    tried.into_iter().find(|p| is_model_dir(p)).ok_or_else(|| {
        Precondition::new(
            "model",
            format!("no checkpoint for '{spec}' (looked in {}; set {MODEL_CACHE_ENV})", cache.display()),
        )
    })
}

pub fn load_model(spec: &str) -> Result<Transformer> {
    let dir = resolve_model(spec)?;
    let name = Path::new(spec)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    Ok(Transformer::load(&dir)
        .with_context(|| format!("loading model from {}", dir.display()))?
        .named(&name))
}
