use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use nowcast_core::io::{sha256_file, write_json};
use nowcast_core::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command run, written last into the output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_paths: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub flags: BTreeMap<String, String>,
    /// SHA-256 of every input file, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file, keyed by name relative to the output
    /// directory.
    pub outputs: BTreeMap<String, String>,
    pub duration_seconds: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_paths: Vec::new(),
            seeds: Vec::new(),
            flags: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            duration_seconds: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn flag(&mut self, name: &str, value: impl ToString) {
        self.flags.insert(name.to_string(), value.to_string());
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn outputs(&mut self, out_dir: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let key = f.strip_prefix(out_dir).unwrap_or(f).display().to_string();
            self.outputs.insert(key, sha256_file(f)?);
        }
        Ok(())
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf> {
        if let Some(t) = self.started {
            self.duration_seconds = t.elapsed().as_secs_f64();
        }
        let path = out_dir.join(MANIFEST_FILE);
        write_json(&path, &self)?;
        Ok(path)
    }
}
