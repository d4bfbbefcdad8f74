//! Run-directory manifests: content hashes that make determinism checkable.
//!
//! Every artifact in a run directory is listed with its SHA-256. The metric
//! stream is the one file with a non-deterministic column (`wallclock_ms`),
//! so its manifest entry hashes the deterministic projection — every column
//! except the last — and records that rule.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub run_id: String,
    pub config_hash: String,
    /// Relative path -> sha256 hex. `metrics.csv` is hashed without its
    /// wallclock column.
    pub files: BTreeMap<String, String>,
    pub metrics_hash_rule: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Strip the final column (wallclock) from each CSV row.
pub fn metrics_projection(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        match line.rfind(',') {
            Some(pos) => out.push_str(&line[..pos]),
            None => out.push_str(line),
        }
        out.push('\n');
    }
    out
}

fn hash_file(path: &Path, relative: &str) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    if relative == METRICS_FILE {
        let text = String::from_utf8_lossy(&bytes);
        Ok(sha256_hex(metrics_projection(&text).as_bytes()))
    } else {
        Ok(sha256_hex(&bytes))
    }
}

/// Build a manifest over every regular file under `dir` (except any existing
/// manifest), with paths relative to `dir`.
pub fn build_manifest(dir: &Path, run_id: &str, config_hash: &str) -> std::io::Result<Manifest> {
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files)?;
    Ok(Manifest {
        run_id: run_id.to_string(),
        config_hash: config_hash.to_string(),
        files,
        metrics_hash_rule: "metrics.csv hashed without its trailing wallclock_ms column".into(),
    })
}

fn collect(
    root: &Path,
    dir: &Path,
    files: &mut BTreeMap<String, String>,
) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect(root, &path, files)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("path under root")
                .to_string_lossy()
                .replace('\\', "/");
            if rel == "manifest.json" {
                continue;
            }
            files.insert(rel.clone(), hash_file(&path, &rel)?);
        }
    }
    Ok(())
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(dir.join("manifest.json"), text + "\n")
}

pub fn read_manifest(dir: &Path) -> std::io::Result<Manifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
