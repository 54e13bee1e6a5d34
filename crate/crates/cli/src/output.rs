use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::SCHEMA_VERSION;
use crate::error::{CliError, ErrorKind};

/// Collects the files written by one command.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    /// Writes through a closure that fills a buffer, e.g. a CSV writer.
    pub fn write_with(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> bayesrake::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        fill(&mut buf).map_err(|e| CliError::new(ErrorKind::Other, e))?;
        self.write(name, buf)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::new(ErrorKind::Other, e))?;
        self.write(name, text + "\n")
    }

    /// Writes `manifest.json` listing every earlier file, and returns all
    /// written paths.
    pub fn finish(
        mut self,
        command: &str,
        config: &impl Serialize,
        inputs: &[&Path],
        extra: serde_json::Value,
    ) -> Result<Vec<PathBuf>, CliError> {
        let outputs: Vec<String> = self
            .written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        let inputs = inputs
            .iter()
            .map(|p| {
                let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
                Ok(serde_json::json!({
                    "path": p.display().to_string(),
                    "bytes": bytes.len(),
                    "sha256": sha256_hex(&bytes),
                }))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let manifest = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "tool": "bayesrake",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
            "inputs": inputs,
            "outputs": outputs,
            "details": extra,
        });
        self.write_json("manifest.json", &manifest)?;
        Ok(self.written)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
