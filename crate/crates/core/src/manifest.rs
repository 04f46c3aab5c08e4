//! Content hashes and run manifests.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> io::Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Written next to every command output: what ran, on what, producing what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub profile: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub warnings: usize,
}

impl RunManifest {
    pub fn new(
        command: &str,
        profile: serde_json::Value,
        inputs: &[&Path],
        outputs: &[&Path],
        warnings: usize,
    ) -> io::Result<Self> {
        Ok(Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            profile,
            inputs: inputs.iter().map(|p| FileHash::of(p)).collect::<Result<_, _>>()?,
            outputs: outputs.iter().map(|p| FileHash::of(p)).collect::<Result<_, _>>()?,
            warnings,
        })
    }

    /// `<output>.manifest.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// Re-hashes every listed file. Relative paths resolve against `base`.
    pub fn verify(&self, base: &Path) -> Vec<Mismatch> {
        self.inputs
            .iter()
            .chain(&self.outputs)
            .filter_map(|f| {
                let path = if f.path.is_absolute() {
                    f.path.clone()
                } else {
                    base.join(&f.path)
                };
                match sha256_file(&path) {
                    Ok(h) if h == f.sha256 => None,
                    Ok(h) => Some(Mismatch {
                        path,
                        expected: f.sha256.clone(),
                        found: Some(h),
                    }),
                    Err(_) => Some(Mismatch {
                        path,
                        expected: f.sha256.clone(),
                        found: None,
                    }),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub path: PathBuf,
    pub expected: String,
    /// `None` when the file could not be read.
    pub found: Option<String>,
}
