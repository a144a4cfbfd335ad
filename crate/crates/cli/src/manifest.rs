use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, Command};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "occlift-run/1";

/// Record of one run. Everything except `started_unix_s` and
/// `wall_seconds` is a pure function of the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool: String,
    pub version: String,
    pub command: String,
    /// The fully resolved arguments, defaults included.
    pub config: serde_json::Value,
    /// Derived model, training and classifier settings.
    pub resolved: BTreeMap<String, serde_json::Value>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    /// Artifact file names relative to the run directory.
    pub outputs: Vec<String>,
    pub started_unix_s: f64,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &Command) -> CliResult<Self> {
        Ok(Self {
            schema: MANIFEST_SCHEMA.to_string(),
            tool: "occlift".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.name().to_string(),
            config: serde_json::to_value(command).map_err(occlift_core::Error::from)?,
            resolved: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix_s: 0.0,
            wall_seconds: 0.0,
        })
    }

    pub fn resolved_insert(&mut self, key: &str, value: &impl Serialize) -> CliResult<()> {
        let value = serde_json::to_value(value).map_err(occlift_core::Error::from)?;
        self.resolved.insert(key.to_string(), value);
        Ok(())
    }

    /// The recorded command, ready to run again.
    pub fn command(&self) -> CliResult<Command> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(occlift_core::Error::Version {
                found: self.schema.clone(),
                expected: MANIFEST_SCHEMA.to_string(),
            }
            .into());
        }
        Ok(serde_json::from_value(self.config.clone()).map_err(occlift_core::Error::from)?)
    }

    /// The manifest with wall-clock fields zeroed, for comparing reruns.
    pub fn without_timestamps(&self) -> Self {
        Self {
            started_unix_s: 0.0,
            wall_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text).map_err(occlift_core::Error::from)?)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(occlift_core::Error::from)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}
