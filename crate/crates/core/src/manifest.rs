// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests and all-or-nothing output writing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_NAME: &str = "snrf";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to reproduce one CLI run. Contains no timestamps or
/// output paths, so equal manifests imply equal output bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, InputDigest>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(subcommand: &str) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            subcommand: subcommand.into(),
            parameters: BTreeMap::new(),
            inputs: BTreeMap::new(),
            seeds: Vec::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).expect("parameter serialises");
        self.parameters.insert(key.into(), v);
        self
    }

    pub fn input(mut self, key: &str, path: &Path) -> Result<Self> {
        let digest = InputDigest { path: path.display().to_string(), sha256: file_digest(path)? };
        self.inputs.insert(key.into(), digest);
        Ok(self)
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seeds.push(seed);
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

// Temp files and dirs are created private; published outputs should not be.
#[cfg(unix)]
fn set_mode(path: &Path, mode: u32) -> Result<()> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(mode)).map_err(|e| Error::io(path, e))
}

#[cfg(not(unix))]
fn set_mode(_path: &Path, _mode: u32) -> Result<()> {
    Ok(())
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = parent_dir(path);
    let mut tmp = tempfile::Builder::new().prefix(".snrf-tmp-").tempfile_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    set_mode(tmp.path(), 0o644)?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// An output directory built in a hidden sibling and moved into place on
/// [`StagedDir::commit`]. Dropping without committing removes everything.
pub struct StagedDir {
    tmp: tempfile::TempDir,
    target: PathBuf,
}

impl StagedDir {
    pub fn new(target: &Path) -> Result<Self> {
        let dir = parent_dir(target);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tmp = tempfile::Builder::new().prefix(".snrf-stage-").tempdir_in(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { tmp, target: target.to_path_buf() })
    }

    /// Path of a file inside the staged directory.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        set_mode(&p, 0o644)
    }

    /// Writes the manifest and moves the directory to its target, replacing
    /// any previous output there.
    pub fn commit(self, manifest: &RunManifest) -> Result<PathBuf> {
        self.write(MANIFEST_FILE, manifest.to_json().as_bytes())?;
        if self.target.exists() {
            if !self.target.is_dir() {
                return Err(Error::io(
                    &self.target,
                    std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output path exists and is not a directory"),
                ));
            }
            std::fs::remove_dir_all(&self.target).map_err(|e| Error::io(&self.target, e))?;
        }
        set_mode(self.tmp.path(), 0o755)?;
        let staged = self.tmp.keep();
        std::fs::rename(&staged, &self.target).map_err(|e| Error::io(&self.target, e))?;
        Ok(self.target)
    }
}

/// Sidecar manifest path for single-file outputs.
pub fn sidecar_manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
