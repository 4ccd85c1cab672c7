use std::path::{Path, PathBuf};

use dafrcnn::training::file_digest;
use serde::Serialize;

use crate::CliError;

#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    /// 64-bit FNV-1a of the file, 16 hex digits.
    pub digest: String,
}

/// Provenance written next to every artifact. It has no timestamps or host
/// details, so identical inputs give an identical sidecar.
#[derive(Serialize)]
pub struct Sidecar<'a, C: Serialize> {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: &'a str,
    pub effective_config: &'a C,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
}

pub fn digest_inputs(paths: &[&Path]) -> Result<Vec<InputDigest>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                digest: file_digest(p).map_err(|e| CliError::Runtime(format!("digest of {}: {e}", p.display())))?,
            })
        })
        .collect()
}

pub fn write_sidecar<C: Serialize>(
    at: &Path,
    command: &str,
    config: &C,
    inputs: &[&Path],
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let s = Sidecar {
        tool: "dafrcnn",
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        effective_config: config,
        inputs: digest_inputs(inputs)?,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&s).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(at, text + "\n").map_err(|e| CliError::Runtime(format!("write {}: {e}", at.display())))
}

/// `<artifact>.run.json`.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}
