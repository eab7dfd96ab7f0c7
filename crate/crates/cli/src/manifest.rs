//! Run manifests: what was run, on which inputs, producing which outputs.

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
    pub started: String,
    pub finished: String,
}

pub fn hash_file(path: &Path) -> Result<InputRecord> {
    let mut file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(InputRecord { path: path.to_path_buf(), bytes, sha256: hex::encode(hasher.finalize()) })
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Collects manifest fields while a command runs.
pub struct Recorder {
    command: String,
    started: DateTime<Utc>,
    inputs: Vec<InputRecord>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &str) -> Self {
        Self { command: command.into(), started: Utc::now(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(hash_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(self, config: serde_json::Value, seed: Option<u64>) -> RunManifest {
        RunManifest {
            tool: "epgpc",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: std::env::args().collect(),
            config,
            seed,
            threads: rayon::current_num_threads(),
            inputs: self.inputs,
            outputs: self.outputs,
            started: stamp(self.started),
            finished: stamp(Utc::now()),
        }
    }
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `<path>.manifest.json`.
pub fn beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, b"abc").unwrap();
        let r = hash_file(&p).unwrap();
        assert_eq!(r.bytes, 3);
        assert_eq!(r.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(beside(Path::new("out/model.json")), PathBuf::from("out/model.json.manifest.json"));
    }
}
