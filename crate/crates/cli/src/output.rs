//! Output files: atomic writes and content hashes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file. Returns the content hash.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<String, CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(sha256_hex(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub name: String,
    pub seconds: f64,
}

/// Side records collected while a command runs: hashes, timings, warnings.
#[derive(Debug, Default)]
pub struct RunLog {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub phases: Vec<PhaseTiming>,
    pub warnings: Vec<String>,
    out_dir: PathBuf,
}

impl RunLog {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            ..Self::default()
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let clock = Instant::now();
        let out = f(self);
        self.phases.push(PhaseTiming {
            name: name.to_string(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }

    /// Reads an input file and records its hash under `name`.
    pub fn read_input(&mut self, name: &str, path: &Path) -> Result<String, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.insert(name.to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    /// Atomically writes `rel` under the output directory.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let hash = write_atomic(&self.out_dir.join(rel), bytes)?;
        self.outputs.insert(rel.to_string(), hash);
        Ok(())
    }

    /// Renders with a CSV writer closure and writes the result.
    pub fn write_with<E: std::fmt::Display>(
        &mut self,
        rel: &str,
        render: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        render(&mut buf).map_err(|e| CliError::io(&self.out_dir.join(rel), e))?;
        self.write(rel, &buf)
    }
}
