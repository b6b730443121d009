use std::path::{Path, PathBuf};
use std::time::Duration;

use evidencesql::agents::{AgentSettings, LlmBackend, RemoteBackend, TemplateBackend};
use evidencesql::canonical::to_canonical_json;
use evidencesql::fusion::DEFAULT_ALPHA;
use evidencesql::knowledge::DEFAULT_QUANTILE;
use evidencesql::pipeline::RunSettings;
use evidencesql::report::Mode;
use evidencesql::store::SchemaManifest;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Template,
    Remote,
}

/// Contents of `--config`. Every field is optional; flags win over file
/// values, which win over defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub temperature: f64,
    pub timeout_seconds: f64,
    pub max_retries: usize,
    pub alpha: f64,
    pub mode: Mode,
    pub quantile: f64,
    pub ranges: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: BackendKind::Template,
            temperature: 0.0,
            timeout_seconds: 60.0,
            max_retries: 2,
            alpha: DEFAULT_ALPHA,
            mode: Mode::Full,
            quantile: DEFAULT_QUANTILE,
            ranges: None,
            manifest: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<(), Failure> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Failure::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.quantile > 0.0 && self.quantile < 0.5) {
            return Err(Failure::config(format!("quantile {} outside (0, 0.5)", self.quantile)));
        }
        if !(self.timeout_seconds > 0.0 && self.timeout_seconds.is_finite()) {
            return Err(Failure::config("timeout_seconds must be positive".to_owned()));
        }
        Ok(())
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            mode: self.mode,
            alpha: self.alpha,
            agent: AgentSettings {
                temperature: self.temperature,
                timeout: Duration::from_secs_f64(self.timeout_seconds),
                max_retries: self.max_retries,
            },
        }
    }

    pub fn backend(&self, manifest: &SchemaManifest) -> Result<Box<dyn LlmBackend>, Failure> {
        Ok(match self.backend {
            BackendKind::Template => Box::new(TemplateBackend::new(manifest.clone())),
            BackendKind::Remote => Box::new(RemoteBackend::from_env().map_err(|e| Failure::config(e.to_string()))?),
        })
    }

    pub fn sha256(&self) -> String {
        let text = to_canonical_json(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
