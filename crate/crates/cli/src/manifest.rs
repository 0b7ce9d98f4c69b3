//! Run manifests: config echo, seeds and artifact checksums.

use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Artifact {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Seeds {
    seed: Option<u64>,
    synth: u64,
    index: u64,
    train: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a ExperimentConfig,
    seeds: Seeds,
    artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.json` into `dir` covering `files` (names inside `dir`).
pub fn write(dir: &Path, command: &str, cfg: &ExperimentConfig, files: &[&str]) -> anyhow::Result<()> {
    let artifacts = files
        .iter()
        .map(|f| {
            let path = dir.join(f);
            let bytes = std::fs::read(&path).with_context(|| format!("cannot read artifact {}", path.display()))?;
            Ok(Artifact {
                file: f.to_string(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let m = Manifest {
        tool: "knnlab",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: cfg,
        seeds: Seeds {
            seed: cfg.seed,
            synth: cfg.synth.seed,
            index: cfg.index.seed,
            train: cfg.train.seed,
        },
        artifacts,
    };
    let path = dir.join(FILE);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
}
