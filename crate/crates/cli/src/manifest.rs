use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tricoat_core::{Error, Result};

/// Content address in git's object format: SHA-256 of `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(blob_hash(&bytes))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub config_path: PathBuf,
    pub started_at: String,
    pub seconds: f64,
    pub threads: usize,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects hashed inputs and outputs while a subcommand runs.
pub struct Recorder {
    root: PathBuf,
    start: Instant,
    started_at: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Recorder {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            start: Instant::now(),
            started_at: chrono::Utc::now().to_rfc3339(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.inputs.insert(self.key(path), h);
        Ok(())
    }

    /// Records a written file; an empty or missing output is a failure.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
        if meta.len() == 0 {
            return Err(Error::Data(format!("output {} is empty", path.display())));
        }
        let h = file_hash(path)?;
        self.outputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn finish(self, command: &str, seed: u64, config: serde_json::Value, config_path: &Path) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            config_path: config_path.to_path_buf(),
            started_at: self.started_at,
            seconds: self.start.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let dir = self.root.join("manifests");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{command}.json"));
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        log::info!("{command}: wrote {} outputs, manifest {}", manifest.outputs.len(), path.display());
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_object_format() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
