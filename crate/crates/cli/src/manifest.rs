//! Run manifests: configuration and input hashes, output hashes and timings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use compmech_core::{sha256_file, sha256_hex};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the result-relevant configuration.
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
    /// Relative output path to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    pub stages: Vec<Stage>,
}

/// Collects outputs and timings for one command and writes `manifest.json`.
pub struct Run {
    out: PathBuf,
    started: Instant,
    manifest: RunManifest,
}

impl Run {
    pub fn start(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let out = cfg.out_dir();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let relevant = cfg.result_relevant();
        let config_sha256 = sha256_hex(&serde_json::to_vec(&relevant)?);
        Ok(Self {
            out,
            started: Instant::now(),
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                config_sha256,
                config: relevant,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_clock_seconds: 0.0,
                stages: Vec::new(),
            },
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let value = f()?;
        let seconds = t.elapsed().as_secs_f64();
        log::info!("{name}: {seconds:.2}s");
        self.manifest.stages.push(Stage { name: name.into(), seconds });
        Ok(value)
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        let hash = cached_file_hash(path).with_context(|| format!("hashing {}", path.display()))?;
        self.manifest.inputs.insert(label.into(), hash);
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Records a file written by other means.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let hash = sha256_file(self.out.join(name)).with_context(|| format!("hashing {name}"))?;
        self.manifest.outputs.insert(name.into(), hash);
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        let path = self.out.join("manifest.json");
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

/// `COMPMECH_CACHE_DIR`, else `$XDG_CACHE_HOME/compmech`, else `~/.cache/compmech`.
pub fn cache_dir() -> Option<PathBuf> {
    if let Some(d) = std::env::var_os("COMPMECH_CACHE_DIR") {
        return Some(PathBuf::from(d));
    }
    if let Some(d) = std::env::var_os("XDG_CACHE_HOME") {
        return Some(PathBuf::from(d).join("compmech"));
    }
    std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache/compmech"))
}

fn file_key(path: &Path) -> std::io::Result<String> {
    let meta = std::fs::metadata(path)?;
    let modified = meta.modified()?.duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    let abs = std::fs::canonicalize(path)?;
    Ok(format!("{}|{}|{}", abs.display(), meta.len(), modified))
}

/// SHA-256 of a file, memoised by path, size and modification time.
pub fn cached_file_hash(path: &Path) -> Result<String> {
    let key = file_key(path)?;
    let cache = cache_dir().map(|d| d.join("file-hashes.json"));
    let mut table: BTreeMap<String, String> = cache
        .as_ref()
        .and_then(|c| std::fs::read(c).ok())
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    if let Some(h) = table.get(&key) {
        return Ok(h.clone());
    }
    let hash = sha256_file(path)?;
    if let Some(cache) = cache {
        table.insert(key, hash.clone());
        if let Err(e) = store(&cache, &table) {
            log::warn!("could not update hash cache {}: {e}", cache.display());
        }
    }
    Ok(hash)
}

fn store(cache: &Path, table: &BTreeMap<String, String>) -> std::io::Result<()> {
    if let Some(parent) = cache.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let nonce = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    let tmp = cache.with_extension(format!("{}.{nonce}.tmp", std::process::id()));
    std::fs::write(&tmp, serde_json::to_vec(table)?)?;
    std::fs::rename(tmp, cache)
}
