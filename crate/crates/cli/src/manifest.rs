use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Ctx;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub outputs: Vec<Artifact>,
    /// Command-specific counts.
    pub summary: serde_json::Value,
}

pub fn hash_file(path: &Path) -> anyhow::Result<(String, u64)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Hashes `files` (relative to `ctx.out`) and writes
/// `<out>/manifests/<command>.json`.
pub fn write(ctx: &Ctx, files: &[PathBuf], summary: serde_json::Value) -> anyhow::Result<PathBuf> {
    let mut outputs = Vec::with_capacity(files.len());
    for rel in files {
        let (sha256, bytes) = hash_file(&ctx.out.join(rel))?;
        outputs.push(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256,
            bytes,
        });
    }
    let m = RunManifest {
        command: ctx.command.to_string(),
        config_path: ctx.config_path.as_ref().map(|p| p.display().to_string()),
        seed: ctx.config.seed,
        outputs,
        summary,
    };
    let dir = ctx.out.join("manifests");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.json", ctx.command));
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(path)
}
