use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

/// Record of one artifact-producing command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// SHA-256 over every file in the output directory except the manifest.
    pub content_hash: String,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

/// Exclusive handle on an output directory. Creating it takes a lock file
/// that is removed on drop.
pub struct OutputDir {
    pub path: PathBuf,
    lock: PathBuf,
    started: Instant,
    outputs: Vec<String>,
}

impl OutputDir {
    /// `overwrite` allows replacing an earlier run's manifest.
    pub fn open(path: &Path, overwrite: bool) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::config(format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    path.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        let dir = OutputDir {
            path: path.to_path_buf(),
            lock,
            started: Instant::now(),
            outputs: Vec::new(),
        };
        if path.join(MANIFEST_FILE).exists() && !overwrite {
            return Err(Error::config(format!(
                "{} already holds a finished run; pass --force to overwrite",
                path.display()
            )));
        }
        Ok(dir)
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.file(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn finish(
        mut self,
        command: &str,
        config: serde_json::Value,
        config_hash: String,
        seeds: Vec<u64>,
        inputs: Vec<String>,
    ) -> Result<RunManifest> {
        let m = RunManifest {
            command: command.into(),
            config,
            config_hash,
            seeds,
            inputs,
            outputs: std::mem::take(&mut self.outputs),
            content_hash: tree_hash(&self.path)?,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let p = self.path.join(MANIFEST_FILE);
        fs::write(&p, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&p, e))?;
        Ok(m)
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if dir != root || !matches!(p.file_name().and_then(|n| n.to_str()), Some(MANIFEST_FILE | LOCK_FILE)) {
            out.push(p);
        }
    }
    Ok(())
}

/// Order-independent digest of a directory tree: relative paths and bytes.
pub fn tree_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| {
            let r = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            (r, p)
        })
        .collect();
    rel.sort();
    let mut h = Sha256::new();
    for (r, p) in rel {
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update((r.len() as u64).to_le_bytes());
        h.update(r.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_and_overwrite_rules() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let a = OutputDir::open(&out, false).unwrap();
        assert!(OutputDir::open(&out, true).is_err());
        a.finish("t", serde_json::json!({}), "h".into(), vec![], vec![]).unwrap();
        assert!(!out.join(LOCK_FILE).exists());
        assert!(OutputDir::open(&out, false).is_err());
        assert!(!out.join(LOCK_FILE).exists());
        assert!(OutputDir::open(&out, true).is_ok());
    }
}
