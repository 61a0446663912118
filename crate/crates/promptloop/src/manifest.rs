//! Run manifests: config hash, code version, per-stage artifact hashes and
//! metrics, wall-clock. Appending stages never rewrites earlier entries, and
//! `verify` recomputes every artifact hash from disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex_string, Config};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Decimal serialization with 17 significant digits (lossless f64 roundtrip).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::config("manifest", format!("bad float `{s}`")))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArtifactRecord {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<ArtifactRecord>,
    /// Metric values serialized via `fmt_f64`.
    pub metrics: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub code_version: String,
    pub config_hash: String,
    /// Canonical config text, sufficient to replay the run.
    pub config_text: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, config: &Config) -> Self {
        RunManifest {
            run_id: run_id.into(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config.hash_hex(),
            config_text: config.canonical_text(),
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Append a completed stage. Artifact paths must be unique across the
    /// whole manifest: every artifact is reachable from exactly one entry.
    pub fn push_stage(&mut self, stage: StageRecord) {
        for prev in &self.stages {
            for a in &prev.artifacts {
                assert!(
                    stage.artifacts.iter().all(|b| b.path != a.path),
                    "artifact {} already recorded",
                    a.path
                );
            }
        }
        self.stages.push(stage);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: RunManifest =
            serde_json::from_str(text).map_err(|e| Error::config("manifest", e.to_string()))?;
        for s in &m.stages {
            for mv in s.metrics.values() {
                parse_f64(mv)?;
            }
            for a in &s.artifacts {
                if a.sha256.len() != 64 || !a.sha256.chars().all(|c| c.is_ascii_hexdigit()) {
                    return Err(Error::config("manifest", format!("bad sha256 for {}", a.path)));
                }
                if a.path.is_empty() || Path::new(&a.path).is_absolute() || a.path.contains("..") {
                    return Err(Error::config("manifest", format!("bad artifact path `{}`", a.path)));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::missing("manifest", &path));
        }
        Self::from_json(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
    }

    /// Recompute all artifact hashes relative to `dir`; the first mismatch or
    /// missing file fails with its path.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for stage in &self.stages {
            for a in &stage.artifacts {
                let p = dir.join(&a.path);
                if !p.exists() {
                    return Err(Error::missing(format!("artifact of stage {}", stage.name), &p));
                }
                let h = hash_path(&p)?;
                if h != a.sha256 {
                    return Err(Error::config(
                        "verify",
                        format!("hash mismatch for {} (stage {})", a.path, stage.name),
                    ));
                }
            }
        }
        Ok(())
    }

    /// All artifact paths recorded so far.
    pub fn artifact_paths(&self) -> Vec<&str> {
        self.stages.iter().flat_map(|s| s.artifacts.iter().map(|a| a.path.as_str())).collect()
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(hash_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Hash a file, or a directory as the hash of its sorted relative paths and
/// per-file hashes.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return hash_file(path);
    }
    let mut entries = Vec::new();
    collect_files(path, path, &mut entries)?;
    entries.sort();
    let mut hasher = Sha256::new();
    for rel in entries {
        let h = hash_file(&path.join(&rel))?;
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(h.as_bytes());
        hasher.update(*b"\n");
    }
    Ok(hex_string(&hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Helper for building a stage record from artifacts on disk.
pub struct StageBuilder {
    name: String,
    started: std::time::Instant,
    artifacts: Vec<ArtifactRecord>,
    metrics: BTreeMap<String, String>,
}

impl StageBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        StageBuilder {
            name: name.into(),
            started: std::time::Instant::now(),
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    /// Record an artifact; `path` must live under `root`.
    pub fn artifact(&mut self, root: &Path, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(root)
            .map_err(|_| Error::config("manifest", format!("{} outside run root", path.display())))?
            .to_string_lossy()
            .replace('\\', "/");
        let sha256 = hash_path(path)?;
        self.artifacts.push(ArtifactRecord { path: rel, sha256 });
        Ok(())
    }

    pub fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), fmt_f64(value));
    }

    pub fn finish(self) -> StageRecord {
        StageRecord {
            name: self.name,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            artifacts: self.artifacts,
            metrics: self.metrics,
        }
    }
}
