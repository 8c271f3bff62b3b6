use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written once into its output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 over the resolved config and every input file.
    pub content_hash: String,
    pub tool_version: String,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: u64,
    started: DateTime<Utc>,
    inputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: serde_json::Value, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config,
            seed,
            started: Utc::now(),
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Lists the files under `out` (relative paths, sorted) and writes the
    /// manifest next to them.
    pub fn finish(self, out: &Path) -> anyhow::Result<RunManifest> {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config)?);
        for input in &self.inputs {
            hash_path(&mut hasher, input)?;
        }
        let mut artifacts = Vec::new();
        collect_files(out, out, &mut artifacts)?;
        artifacts.sort();
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            content_hash: hex::encode(hasher.finalize()),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started: self.started,
            finished: Utc::now(),
            inputs: self.inputs,
            artifacts,
        };
        fs::write(
            out.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }
}

fn hash_path(hasher: &mut Sha256, path: &Path) -> anyhow::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            hash_path(hasher, &e)?;
        }
    } else {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        hasher.update(
            path.file_name()
                .map(|n| n.as_encoded_bytes())
                .unwrap_or_default(),
        );
        hasher.update(&buf);
    }
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_none_or(|n| n != MANIFEST_FILE) {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}
