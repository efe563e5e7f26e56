//! Run configuration: one TOML document merging data, encoder, training and tooling settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vamp_core::data::DataSpec;
use vamp_core::encoders::EncoderConfig;
use vamp_core::gradcheck::GradcheckConfig;
use vamp_core::model::AblationMode;
use vamp_core::train::TrainConfig;

use crate::error::{Result, VampError};

/// Settings of the mode × seed comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub modes: Vec<AblationMode>,
    /// Seeds `0..seeds` (overridden by `--seeds`).
    pub seeds: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { modes: AblationMode::ALL.to_vec(), seeds: 10 }
    }
}

/// Output locations that are not given on the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Per-epoch training metrics; defaults to `<checkpoint>.metrics.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads and validates a config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| VampError::io(p, e))?;
                Self::from_toml(&text).map_err(|message| VampError::ConfigFile { path: p.to_owned(), message })?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization embedded in every artifact.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    /// Hex SHA-256 of [`RunConfig::canonical`].
    pub fn digest(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        check_compatible(&self.data, &self.encoder)?;
        if self.ablation.modes.is_empty() {
            return Err(VampError::Config("ablation.modes is empty".into()));
        }
        Ok(())
    }
}

/// The encoder must consume the task's images and cover all of its classes.
pub fn check_compatible(data: &DataSpec, enc: &EncoderConfig) -> Result<()> {
    let pairs = [
        ("patches", data.patches, enc.patches),
        ("patch_dim", data.patch_dim, enc.patch_dim),
        ("text_dim / text_width", data.text_dim, enc.text_width),
        ("class count", data.num_classes(), enc.num_classes),
    ];
    for (what, d, e) in pairs {
        if d != e {
            return Err(VampError::Config(format!("{what}: data has {d}, encoder expects {e}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_canonical_form_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.canonical();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\nmode = \"TASK_SHARED\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.mode, AblationMode::TaskShared);
        assert_eq!(cfg.encoder, EncoderConfig::toy());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("[trian]\n").is_err());
        assert!(RunConfig::from_toml("seed = 1\n").is_err());
    }

    #[test]
    fn mismatched_geometry_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.c_novel = 5;
        assert!(matches!(cfg.validate(), Err(VampError::Config(_))));
    }
}
