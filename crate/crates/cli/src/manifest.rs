//! Run manifests and staged output directories.
//!
//! Outputs are written into a sibling staging directory and swapped into
//! place together with `manifest.json` when the run finishes, so no output
//! directory ever holds a partial run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    pub protocol_hash: Option<String>,
    pub corpus_digest: Option<String>,
    pub started_unix_ms: u128,
    pub wall_clock_ms: u128,
    /// Backend calls per template.
    #[serde(default)]
    pub calls: BTreeMap<String, u64>,
    #[serde(default)]
    pub incidents: u64,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub struct Staged {
    target: PathBuf,
    staging: PathBuf,
    outputs: Vec<String>,
    started: Instant,
    started_unix_ms: u128,
}

fn sibling(target: &Path, tag: &str) -> PathBuf {
    let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    target.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

impl Staged {
    /// Refuses a nonempty `target` unless `overwrite` is set.
    pub fn begin(target: &Path, overwrite: bool) -> anyhow::Result<Self> {
        if target.exists() {
            let nonempty = fs::read_dir(target).map(|mut d| d.next().is_some()).unwrap_or(true);
            if nonempty && !overwrite {
                bail!("{} exists and is not empty; pass --overwrite to replace it", target.display());
            }
        }
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let staging = sibling(target, "staging");
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Staged {
            target: target.to_path_buf(),
            staging,
            outputs: Vec::new(),
            started: Instant::now(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        fs::write(self.staging.join(name), bytes).with_context(|| format!("writing {name}"))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn manifest(&self, command: &str, config: serde_json::Value) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs: BTreeMap::new(),
            protocol_hash: None,
            corpus_digest: None,
            started_unix_ms: self.started_unix_ms,
            wall_clock_ms: 0,
            calls: BTreeMap::new(),
            incidents: 0,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    /// Write the manifest and move the staged directory into place.
    pub fn commit(self, mut manifest: RunManifest) -> anyhow::Result<PathBuf> {
        manifest.outputs = self.outputs.clone();
        manifest.wall_clock_ms = self.started.elapsed().as_millis();
        let json = serde_json::to_vec_pretty(&manifest)?;
        write_atomic(&self.staging.join(MANIFEST_FILE), &json)?;
        if self.target.exists() {
            let old = sibling(&self.target, "old");
            fs::rename(&self.target, &old).with_context(|| format!("moving aside {}", self.target.display()))?;
            fs::rename(&self.staging, &self.target).with_context(|| format!("installing {}", self.target.display()))?;
            fs::remove_dir_all(&old).with_context(|| format!("removing {}", old.display()))?;
        } else {
            fs::rename(&self.staging, &self.target).with_context(|| format!("installing {}", self.target.display()))?;
        }
        Ok(self.target.clone())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("careloop-manifest-{}-{name}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn commit_replaces_only_with_overwrite() {
        let root = scratch("replace");
        let out = root.join("run");
        let mut s = Staged::begin(&out, false).unwrap();
        s.write("a.txt", b"1").unwrap();
        let m = s.manifest("test", serde_json::Value::Null);
        s.commit(m).unwrap();
        assert_eq!(fs::read(out.join("a.txt")).unwrap(), b"1");

        assert!(Staged::begin(&out, false).is_err());
        let mut s = Staged::begin(&out, true).unwrap();
        s.write("b.txt", b"2").unwrap();
        let m = s.manifest("test", serde_json::Value::Null);
        s.commit(m).unwrap();
        let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, vec!["b.txt", MANIFEST_FILE]);
        let siblings = fs::read_dir(&root).unwrap().count();
        assert_eq!(siblings, 1, "staging or old directories left behind");
        fs::remove_dir_all(root).unwrap();
    }

    #[test]
    fn abandoned_staging_is_cleaned() {
        let root = scratch("abandon");
        let out = root.join("run");
        {
            let mut s = Staged::begin(&out, false).unwrap();
            s.write("a.txt", b"1").unwrap();
        }
        assert!(!out.exists());
        assert_eq!(fs::read_dir(&root).unwrap().count(), 0);
        fs::remove_dir_all(root).unwrap();
    }
}
