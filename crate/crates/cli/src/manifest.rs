//! Run manifests: what was run, with which settings, and what it wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swarmwm_core::runtime::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    /// Fully resolved settings after preset, file and flag layering.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timings: Timings,
}

pub fn sha256_file(path: &Path) -> Result<Artifact> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    Ok(Artifact { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64 })
}

/// Every regular file below `dir`, sorted, skipping manifests.
pub fn files_below(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).with_context(|| format!("cannot list {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| !n.ends_with("manifest.json") && !n.ends_with(".tmp")) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub struct ManifestBuilder {
    subcommand: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, config: impl Serialize) -> Result<Self> {
        Ok(Self {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config)?,
            seeds: Vec::new(),
            inputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn seeds(&mut self, seeds: impl IntoIterator<Item = u64>) -> &mut Self {
        self.seeds.extend(seeds);
        self
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.inputs.push(path.into());
        self
    }

    /// Hashes inputs and `outputs` and writes the manifest atomically to `at`.
    pub fn finish(self, outputs: &[PathBuf], at: &Path) -> Result<RunManifest> {
        let hash_all = |ps: &[PathBuf]| ps.iter().map(|p| sha256_file(p)).collect::<Result<Vec<_>>>();
        let m = RunManifest {
            subcommand: self.subcommand,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seeds: self.seeds,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(outputs)?,
            timings: Timings { elapsed_s: self.started.elapsed().as_secs_f64() },
        };
        write_atomic(at, &serde_json::to_vec_pretty(&m)?).with_context(|| format!("cannot write manifest {}", at.display()))?;
        Ok(m)
    }
}

/// Manifest location for a single-file output: `model.json` gets
/// `model.manifest.json` beside it.
pub fn manifest_beside(file: &Path) -> PathBuf {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    file.with_file_name(format!("{stem}.manifest.json"))
}
