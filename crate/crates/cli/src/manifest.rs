use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Local, SecondsFormat};
use gfbs_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::Command;

pub const FILE: &str = "manifest.json";

/// Written next to every command's outputs. `invocation` holds the fully
/// resolved command (absolute paths, explicit output directory), so the
/// manifest alone is enough to run it again.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub invocation: Command,
    pub config_paths: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub git_describe: String,
    pub version: String,
    pub out_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
}

pub fn now() -> String {
    Local::now().to_rfc3339_opts(SecondsFormat::Secs, false)
}

/// `./runs/<timestamp>` when no directory was given.
pub fn default_out_dir() -> PathBuf {
    PathBuf::from("runs").join(Local::now().format("%Y%m%d-%H%M%S%.3f").to_string())
}

/// Absolute form of `p` without touching the file system.
pub fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(name: &str, invocation: Command, out_dir: &Path) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: name.to_string(),
                invocation,
                config_paths: Vec::new(),
                seeds: BTreeMap::new(),
                git_describe: env!("GFBS_GIT_DESCRIBE").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                out_dir: out_dir.to_path_buf(),
                started_at: now(),
                finished_at: String::new(),
                outputs: Vec::new(),
            },
        }
    }

    pub fn config(&mut self, p: Option<&PathBuf>) -> &mut Self {
        self.manifest.config_paths.extend(p.cloned());
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.manifest.seeds.insert(name.to_string(), seed);
        self
    }

    /// Writes `contents` under the output directory and records it.
    pub fn write(&mut self, file: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.manifest.out_dir.join(file);
        fs::write(&path, contents)?;
        self.manifest.outputs.push(file.to_string());
        Ok(path)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_at = now();
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::format(e.to_string()))? + "\n";
        fs::write(self.manifest.out_dir.join(FILE), text)?;
        Ok(self.manifest)
    }
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}
