//! Run manifest: resolved config echo plus content hashes of every input
//! and output file, so a run can be reproduced and verified exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::ResolvedConfig;
use crate::CliError;

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::runtime(format!("cannot hash {}: {e}", path.display())))?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write `manifest.json` into the report directory.
pub fn write_manifest(
    report_dir: &Path,
    config: &ResolvedConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let mut input_hashes = BTreeMap::new();
    for path in inputs {
        input_hashes.insert(path.display().to_string(), sha256_file(path)?);
    }
    let mut output_hashes = BTreeMap::new();
    for path in outputs {
        output_hashes.insert(path.display().to_string(), sha256_file(path)?);
    }
    let manifest = serde_json::json!({
        "config": config,
        "inputs": input_hashes,
        "outputs": output_hashes,
    });
    let path = report_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}
