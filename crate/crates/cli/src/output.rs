//! Output directory and run manifest.

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Command;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub ok: bool,
    pub seconds: f64,
    pub error: Option<String>,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub started_at_unix: u64,
    pub wall_clock_seconds: f64,
    pub success: bool,
    pub stages: Vec<StageReport>,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    /// The manifest with every timing field zeroed, for comparing runs.
    pub fn without_timestamps(&self) -> Self {
        let mut m = self.clone();
        m.started_at_unix = 0;
        m.wall_clock_seconds = 0.0;
        for s in &mut m.stages {
            s.seconds = 0.0;
        }
        m
    }
}

/// All writes of a run go through here, confined to `root`.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<OutputFile>,
}

impl OutputDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }

    /// Writes `bytes` to `name`, a plain relative file name inside the
    /// output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), String> {
        let rel = Path::new(name);
        if name.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(format!("refusing to write {name:?} outside the output directory"));
        }
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
        std::fs::write(&path, bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        self.files.retain(|f| f.path != name);
        self.files.push(OutputFile { path: name.into(), sha256: hex::encode(Sha256::digest(bytes)), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), String> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| e.to_string())?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn write_csv<S: AsRef<str>>(&mut self, name: &str, header: &[S], rows: &[Vec<String>]) -> Result<(), String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header.iter().map(AsRef::as_ref)).map_err(|e| e.to_string())?;
        for r in rows {
            w.write_record(r).map_err(|e| e.to_string())?;
        }
        let bytes = w.into_inner().map_err(|e| e.to_string())?;
        self.write(name, &bytes)
    }
}

/// Shortest round-trip formatting for CSV cells.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
