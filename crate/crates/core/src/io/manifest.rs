//! Per-run `manifest.json`: what produced the directory and a checksum for
//! every file in it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FORMAT: &str = "RTEN1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub crate_version: String,
    pub tensor_format: String,
    /// Digests of the upstream manifests this run read, by command name.
    pub inputs: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
    pub metrics: BTreeMap<String, f64>,
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(root, &p, out)?;
        } else if p != root.join(MANIFEST_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

impl Manifest {
    /// Checksums every file under `dir` except the manifest itself, in path
    /// order.
    pub fn build(
        dir: &Path,
        command: &str,
        config_hash: &str,
        inputs: BTreeMap<String, String>,
        metrics: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let mut paths = Vec::new();
        collect(dir, dir, &mut paths)?;
        let mut files = Vec::with_capacity(paths.len());
        for p in paths {
            let bytes = fs::read(&p)?;
            files.push(FileEntry {
                path: relative(dir, &p),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            tensor_format: TENSOR_FORMAT.to_string(),
            inputs,
            files,
            metrics,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_json()?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Missing(path.display().to_string()));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Digest of the serialized manifest.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    /// Every listed file exists under `dir` with the recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let path = dir.join(&f.path);
            let bytes = fs::read(&path).map_err(|_| Error::Missing(path.display().to_string()))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(Error::Consistency(format!(
                    "checksum mismatch for {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// Reads and checks the manifest of a prerequisite run directory.
    pub fn require(dir: &Path, command: &str) -> Result<Self> {
        let m = Self::read(dir).map_err(|_| {
            Error::Missing(format!(
                "{command} output at {} (run `{command}` first)",
                dir.display()
            ))
        })?;
        if m.command != command {
            return Err(Error::Missing(format!(
                "{} holds `{}` output, expected `{command}`",
                dir.display(),
                m.command
            )));
        }
        m.verify(dir)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_tampering_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("b.txt"), "b").unwrap();
        fs::write(dir.path().join("sub/a.txt"), "a").unwrap();
        let m = Manifest::build(
            dir.path(),
            "gen-data",
            "h",
            BTreeMap::new(),
            BTreeMap::new(),
        )
        .unwrap();
        let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(names, ["b.txt", "sub/a.txt"]);
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::require(dir.path(), "gen-data").unwrap(), m);
        assert!(matches!(
            Manifest::require(dir.path(), "stage1"),
            Err(Error::Missing(_))
        ));
        fs::write(dir.path().join("b.txt"), "changed").unwrap();
        assert!(matches!(m.verify(dir.path()), Err(Error::Consistency(_))));
        fs::write(dir.path().join("b.txt"), "b").unwrap();
        fs::remove_file(dir.path().join("sub/a.txt")).unwrap();
        assert!(matches!(m.verify(dir.path()), Err(Error::Missing(_))));
    }
}
