//! Run provenance artifacts.
//!
//! Every command that produces results drops a `manifest.json` describing
//! what ran (full argv, resolved configuration, dataset content hash, code
//! version, wall-clock bounds) plus a flat `config.txt` for quick diffing.
//! Together with the deterministic seeds recorded in the config, a manifest
//! is enough to re-execute the run bit-identically.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// The argv the process was started with, joined by single spaces.
    pub command: String,
    pub code_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    /// Content hash of the dataset directory, empty when no dataset is read.
    pub dataset_fingerprint: String,
    /// Every knob that affects results, resolved to its effective value.
    pub resolved_config: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(started_at: DateTime<Utc>, config: BTreeMap<String, String>) -> Self {
        RunManifest {
            command: std::env::args().collect::<Vec<_>>().join(" "),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at,
            finished_at: Utc::now(),
            dataset_fingerprint: String::new(),
            resolved_config: config,
        }
    }
}

/// SHA-256 over every regular file under `root`, visited in sorted relative
/// path order. Each file contributes its path, byte length and content, all
/// NUL-separated, so renames and truncations change the hash.
pub fn fingerprint_dataset(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for rel in &files {
        let path = root.join(rel);
        let mut file = fs::File::open(&path)
            .with_context(|| format!("open {} for fingerprinting", path.display()))?;
        buf.clear();
        file.read_to_end(&mut buf)
            .with_context(|| format!("read {} for fingerprinting", path.display()))?;
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update(buf.len().to_le_bytes());
        hasher.update([0]);
        hasher.update(&buf);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries =
        fs::read_dir(dir).with_context(|| format!("list directory {}", dir.display()))?;
    for entry in entries {
        let entry = entry.with_context(|| format!("list directory {}", dir.display()))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walked paths stay under the root");
            // Forward slashes keep the hash platform independent.
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.push(rel);
        }
    }
    Ok(())
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).context("serialize manifest")?;
    fs::write(path, json).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

/// Plain `key=value` lines, one per config entry, sorted by key.
pub fn write_config_txt(path: &Path, config: &BTreeMap<String, String>) -> Result<()> {
    let mut out = fs::File::create(path).with_context(|| format!("write {}", path.display()))?;
    for (key, value) in config {
        writeln!(out, "{key}={value}").with_context(|| format!("write {}", path.display()))?;
    }
    Ok(())
}
