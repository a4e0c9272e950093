//! Run manifests: what was run, with which settings, producing which files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<OutputFile>,
    pub tokenizer_hash: Option<String>,
    /// Non-reproducible timings live here and nowhere else.
    pub timings: BTreeMap<String, f64>,
    pub wallclock_seconds: f64,
}

/// Collects outputs of one command run and writes the manifest last.
pub struct Run {
    out_dir: PathBuf,
    started: Instant,
    pub manifest: RunManifest,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

impl Run {
    pub fn start(command: &str, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Run {
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                version: version(),
                config: BTreeMap::new(),
                seeds: Vec::new(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                tokenizer_hash: None,
                timings: BTreeMap::new(),
                wallclock_seconds: 0.0,
            },
        })
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.to_string(), path.display().to_string());
    }

    /// Writes `name` under the output directory and records it.
    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        write_atomic(&path, contents.as_bytes())?;
        self.manifest.outputs.retain(|o| o.path != name);
        self.manifest.outputs.push(OutputFile {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(contents.as_bytes())),
            bytes: contents.len() as u64,
        });
        Ok(path)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.wallclock_seconds = self.started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&self.out_dir.join(MANIFEST_NAME), json.as_bytes())?;
        Ok(self.manifest)
    }
}
