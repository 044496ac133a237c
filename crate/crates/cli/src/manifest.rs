use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every stage's output. It holds no
/// timestamps, so data-only stages stay byte-identical on reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub stage: String,
    pub device: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, config: &ExperimentConfig, device: &str) -> Self {
        Self {
            tool: "menisc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: menisc_core::VERSION.into(),
            stage: stage.into(),
            device: device.into(),
            seed: config.seed,
            config_sha256: config.hash(),
            config: config.clone(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.display().to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
