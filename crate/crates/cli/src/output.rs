//! Artifact directory with a manifest of every file written.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    files: &'a [FileEntry],
    results: &'a Value,
    checks: &'a [Check],
}

pub struct Artifacts {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Artifacts {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Absolute path for `rel`, creating parent directories.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    /// Records a file written through [`Artifacts::path`].
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let bytes = fs::read(self.root.join(rel)).with_context(|| format!("reading back {rel}"))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path(rel)?, bytes).with_context(|| format!("writing {rel}"))?;
        self.record(rel)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.write_bytes(rel, &text)
    }

    /// Runs `f` on an in-memory buffer and stores the result.
    pub fn write_with<F>(&mut self, rel: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> negdyn::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("encoding {rel}"))?;
        self.write_bytes(rel, &buf)
    }

    pub fn write_pgm(&mut self, rel: &str, pixels: &[f64], height: usize, width: usize) -> Result<()> {
        let bytes = negdyn::image::encode_pgm(pixels, height, width)?;
        self.write_bytes(rel, &bytes)
    }

    /// Writes `<command>.manifest.json` last, listing every recorded file.
    pub fn finish(self, command: &str, config_hash: &str, seed: u64, results: &Value, checks: &[Check]) -> Result<PathBuf> {
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_hash,
            seed,
            files: &self.files,
            results,
            checks,
        };
        let path = self.root.join(format!("{command}.manifest.json"));
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
