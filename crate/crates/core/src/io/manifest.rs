//! Run manifest: one JSON document per output directory tying the
//! artifacts to the command, resolved configuration, seed, and the SHA-256
//! of every input file, so a run can be audited and re-verified later.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_file, IoError};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Canonical key=value echo of the resolved configuration.
    pub config_echo: String,
    /// SHA-256 of `config_echo`.
    pub config_hash: String,
    /// Input path -> SHA-256 of its bytes.
    pub input_hashes: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub timestamp_unix: u64,
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String, IoError> {
    Ok(hash_bytes(&read_file(path)?))
}

impl RunManifest {
    /// Assembles a manifest, hashing the config echo and every input file.
    pub fn new(
        command: &str,
        config_echo: &str,
        inputs: &[&Path],
        seed: Option<u64>,
        tool_version: &str,
    ) -> Result<Self, IoError> {
        let mut input_hashes = BTreeMap::new();
        for p in inputs {
            input_hashes.insert(p.display().to_string(), hash_file(p)?);
        }
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(RunManifest {
            command: command.to_string(),
            config_echo: config_echo.to_string(),
            config_hash: hash_bytes(config_echo.as_bytes()),
            input_hashes,
            seed,
            tool_version: tool_version.to_string(),
            timestamp_unix: now,
        })
    }
}

/// Writes `manifest.json` into the directory, the single manifest an
/// output directory carries.
pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), IoError> {
    let path = dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    super::write_file(&path, text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, IoError> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = read_file(&path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| IoError::Format("manifest: not valid UTF-8".into()))?;
    Ok(serde_json::from_str(text)?)
}

/// Re-hashes the manifest's config echo and every input file, failing with
/// one message listing each mismatch.
pub fn verify_manifest(manifest: &RunManifest) -> Result<(), IoError> {
    let mut problems = Vec::new();
    if hash_bytes(manifest.config_echo.as_bytes()) != manifest.config_hash {
        problems.push("config echo does not match its recorded hash".to_string());
    }
    for (path, want) in &manifest.input_hashes {
        match hash_file(Path::new(path)) {
            Ok(got) if &got == want => {}
            Ok(got) => problems.push(format!(
                "input {path:?} hashes to {got} but the manifest recorded {want}"
            )),
            Err(e) => problems.push(format!("input {path:?} cannot be read: {e}")),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(IoError::Format(format!(
            "manifest verification failed: {}",
            problems.join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_verification() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.bin");
        std::fs::write(&input, b"payload").unwrap();
        let m = RunManifest::new(
            "train",
            "seed=7\n",
            &[input.as_path()],
            Some(7),
            "0.1.0",
        )
        .unwrap();
        write_manifest(dir.path(), &m).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(m, back);
        verify_manifest(&back).unwrap();
    }

    #[test]
    fn tampered_input_is_reported_by_path() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.bin");
        std::fs::write(&input, b"payload").unwrap();
        let m = RunManifest::new("eval", "", &[input.as_path()], None, "0.1.0").unwrap();
        std::fs::write(&input, b"tampered").unwrap();
        let err = verify_manifest(&m).unwrap_err();
        assert!(err.to_string().contains("input.bin"), "{err}");
    }

    #[test]
    fn known_hash_value() {
        // sha256 of the empty string, a fixed reference.
        assert_eq!(
            hash_bytes(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
