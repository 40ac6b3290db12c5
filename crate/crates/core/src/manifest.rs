//! Run manifests: written before a run touches its outputs, completed
//! after, and sufficient to re-execute the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "tilevlm-run/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Started,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Fully materialised configuration of the run.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub status: RunStatus,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Parameter digests per checkpoint, keyed by prefix.
    pub checkpoint_digests: BTreeMap<String, BTreeMap<String, String>>,
    pub error: Option<String>,
}

pub fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            format: FORMAT.into(),
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            threads: None,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: RunStatus::Started,
            started_at: now_rfc3339(),
            finished_at: None,
            checkpoint_digests: BTreeMap::new(),
            error: None,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::Parse(format!("unsupported manifest format `{}`", m.format)));
        }
        Ok(m)
    }

    pub fn finish(&mut self, result: &Result<()>) {
        self.finished_at = Some(now_rfc3339());
        match result {
            Ok(()) => self.status = RunStatus::Completed,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e.to_string());
            }
        }
    }

    /// The recorded configuration, decoded.
    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Writes a started manifest, runs `body`, then records the outcome. The
/// manifest exists on disk before `body` writes anything.
pub fn with_manifest<R>(
    path: &Path,
    mut manifest: RunManifest,
    body: impl FnOnce(&mut RunManifest) -> Result<R>,
) -> Result<(R, RunManifest)> {
    manifest.write(path)?;
    let out = body(&mut manifest);
    let status = out.as_ref().map(|_| ()).map_err(|e| Error::Contract(e.to_string()));
    manifest.finish(&status);
    manifest.write(path)?;
    out.map(|r| (r, manifest))
}
