//! Run manifests and git-style content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

/// Hash of a file's bytes framed like a git blob (sha256 object format).
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file, or of a directory as a sorted listing of relative paths
/// and blob hashes. `skip` names top-level entries left out (a run's own
/// manifest).
pub fn content_hash(path: &Path, skip: &[&str]) -> CliResult<String> {
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        return Ok(blob_hash(&bytes));
    }
    let mut h = Sha256::new();
    h.update(b"tree\0");
    for (rel, hash) in file_hashes(path, skip)? {
        h.update(format!("{rel} {hash}\n").as_bytes());
    }
    Ok(hex(&h.finalize()))
}

/// `(relative path, blob hash)` of every file under `dir`, sorted by path.
pub fn file_hashes(dir: &Path, skip: &[&str]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::io(dir.display().to_string(), e.into()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .expect("walkdir yields children")
            .to_string_lossy()
            .replace('\\', "/");
        if skip.iter().any(|s| rel == *s || rel.ends_with(".tmp")) {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| CliError::io(rel.clone(), e))?;
        out.push((rel, blob_hash(&bytes)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Input {
    pub role: String,
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Effective configuration (`key = value` text), after overrides.
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<Input>,
    /// Combined hash of every input.
    pub input_hash: String,
    /// Hash of command, config, seed and inputs: equal identities promise
    /// equal artifacts.
    pub identity: String,
    pub artifacts: Vec<Artifact>,
    pub timing: Timing,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<String>, seed: Option<u64>, inputs: Vec<Input>) -> Self {
        let mut h = Sha256::new();
        for i in &inputs {
            h.update(format!("{} {}\n", i.role, i.hash).as_bytes());
        }
        let input_hash = hex(&h.finalize());
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\0");
        h.update(config.as_deref().unwrap_or("").as_bytes());
        h.update(b"\0");
        h.update(seed.map(|s| s.to_string()).unwrap_or_default().as_bytes());
        h.update(b"\0");
        h.update(input_hash.as_bytes());
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs,
            input_hash,
            identity: hex(&h.finalize()),
            artifacts: Vec::new(),
            timing: Timing { seconds: 0.0 },
        }
    }

    /// Records every file under `out` (except the manifest) and writes the
    /// manifest there.
    pub fn finish(mut self, out: &Path, seconds: f64) -> CliResult<Self> {
        self.artifacts = file_hashes(out, &[MANIFEST])?
            .into_iter()
            .map(|(path, hash)| Artifact { path, hash })
            .collect();
        self.timing = Timing { seconds };
        let text = serde_json::to_string_pretty(&self)? + "\n";
        write_atomic(&out.join(MANIFEST), text.as_bytes())?;
        Ok(self)
    }
}

pub fn input(role: &str, path: &Path) -> CliResult<Input> {
    Ok(Input {
        role: role.to_string(),
        path: path.to_path_buf(),
        hash: content_hash(path, &[MANIFEST])?,
    })
}

/// Writes through a temporary sibling and renames, so reruns never leave a
/// half-written artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_framing() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn directory_hash_ignores_listed_entries_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "1").unwrap();
        let h1 = content_hash(dir.path(), &[MANIFEST]).unwrap();
        fs::write(dir.path().join(MANIFEST), "{}").unwrap();
        assert_eq!(content_hash(dir.path(), &[MANIFEST]).unwrap(), h1);
        fs::write(dir.path().join("a.txt"), "2").unwrap();
        assert_ne!(content_hash(dir.path(), &[MANIFEST]).unwrap(), h1);
    }

    #[test]
    fn identity_excludes_timing() {
        let a = RunManifest::new("train", Some("seed = 1".into()), Some(1), vec![]);
        let mut b = a.clone();
        b.timing.seconds = 99.0;
        assert_eq!(a.identity, b.identity);
        let c = RunManifest::new("train", Some("seed = 2".into()), Some(2), vec![]);
        assert_ne!(a.identity, c.identity);
    }
}
