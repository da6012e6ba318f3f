//! Persisted calibration results.
//!
//! An artifact is stale when its fingerprint differs from the one the
//! current config produces; only calibration inputs feed the fingerprint.

use std::fs;
use std::path::Path;

use lpa_cusum::calibrate::ScusumDelta;
use lpa_cusum::CalibrationResult;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};
use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub master_seed: u64,
    /// Hash of every input that affects calibration.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub provenance: Provenance,
    pub result: CalibrationResult<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scusum: Option<ScusumDelta<f64>>,
}

pub fn fingerprint(cfg: &RunConfig) -> String {
    let inputs = format!(
        "{:?}|{:?}|{}|{:?}|{}",
        cfg.model, cfg.oracle_mode, cfg.oracle_i, cfg.calibration, cfg.master_seed
    );
    sha256_hex(inputs.as_bytes())
}

pub fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance {
        tool: "lpacusum".into(),
        version: VERSION.into(),
        config_sha256: cfg.sha256.clone(),
        master_seed: cfg.master_seed,
        fingerprint: fingerprint(cfg),
    }
}

/// Comment lines recorded at the top of every output file.
pub fn header_lines(cfg: &RunConfig, command: &str) -> Vec<String> {
    vec![
        format!("lpacusum {VERSION}"),
        format!("command: {command}"),
        format!("config_sha256: {}", cfg.sha256),
        format!("master_seed: {}", cfg.master_seed),
        format!("trials: {}", cfg.trials),
    ]
}

impl Artifact {
    pub fn save(&self, path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
        let body = toml::to_string(self).map_err(|e| CliError::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut text: String = header_lines(cfg, "calibrate")
            .iter()
            .map(|l| format!("# {l}\n"))
            .collect();
        text.push_str(&body);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    /// Loads an artifact and rejects one produced from different inputs.
    pub fn load_fresh(path: &Path, cfg: &RunConfig) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Artifact {
            path: path.to_path_buf(),
            message: format!("cannot read calibration ({e}); run `lpacusum calibrate` first"),
        })?;
        let artifact: Self = toml::from_str(&text).map_err(|e| CliError::Artifact {
            path: path.to_path_buf(),
            message: format!("malformed calibration: {e}"),
        })?;
        if artifact.provenance.fingerprint != fingerprint(cfg) {
            return Err(CliError::Artifact {
                path: path.to_path_buf(),
                message:
                    "calibration is stale: model, oracle, calibration settings or seed changed; \
                          rerun `lpacusum calibrate`"
                        .into(),
            });
        }
        Ok(artifact)
    }
}
