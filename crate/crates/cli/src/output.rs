//! Output directory bookkeeping and the run manifest.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use flowlab::RngSpec;

pub const MANIFEST: &str = "manifest.json";

/// Records every file written so the manifest can list them.
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> anyhow::Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of `config`, hex encoded.
    pub config_digest: String,
    /// The resolved configuration (file plus command-line overrides) as TOML.
    pub config: String,
    pub rng: RngSpec,
    pub code_version: String,
    pub files: Vec<String>,
}

pub fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: String, rng: RngSpec, files: &[String]) -> Self {
        Self {
            command: command.to_string(),
            config_digest: digest(&config),
            config,
            rng,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            files: files.to_vec(),
        }
    }

    #[cfg(test)]
    pub fn digest_matches(&self) -> bool {
        digest(&self.config) == self.config_digest
    }
}

/// Writes `config.toml` and the manifest listing every emitted file.
pub fn finish(out: &mut Output, command: &str, config_toml: &str, rng: RngSpec) -> anyhow::Result<RunManifest> {
    out.write("config.toml", config_toml)?;
    let manifest = RunManifest::new(command, config_toml.to_string(), rng, out.files());
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.path(MANIFEST), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_sha256_hex() {
        assert_eq!(digest("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_lists_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Output::create(dir.path()).unwrap();
        out.write("a/b.csv", "x\n").unwrap();
        out.write("a/b.csv", "y\n").unwrap();
        let m = finish(&mut out, "gen-paths", "[run]\nseed = 1\n", RngSpec::new(1, 0)).unwrap();
        assert_eq!(m.files, vec!["a/b.csv", "config.toml"]);
        assert!(m.digest_matches());
        let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
