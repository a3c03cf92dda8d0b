//! Run manifests: what a command read, what it wrote, and how long it took.

use std::path::{Path, PathBuf};
use std::time::Instant;

use itm_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

pub struct Recorder {
    command: &'static str,
    started: Instant,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &'static str) -> Self {
        Recorder {
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(self, config: impl Serialize) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: self.inputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `<out>.manifest.json` next to a primary output file.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Writes to `path`, or prints one JSON line on stderr when no path is
    /// given.
    pub fn emit(&self, path: Option<&Path>) -> Result<()> {
        match path {
            Some(p) => self.write(p),
            None => {
                eprintln!("{}", serde_json::json!({ "manifest": self }));
                Ok(())
            }
        }
    }
}
