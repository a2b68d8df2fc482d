//! Experiment configuration (TOML). Every section and field is optional.
//!
//! ```toml
//! [arch]
//! depth = 4
//! [data]
//! train_per_class = 500
//! [train]
//! epochs = 30
//! [wpac]
//! proxy_size = 256
//! weighting = "importance"
//! [piad]
//! ratio = 0.5
//! [experiment]
//! seeds = [0, 1, 2, 3, 4]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use skd_core::piad::PiadConfig;
use skd_core::wpac::{Weighting, WpacConfig};
use skd_core::{ArchConfig, Error, Result};

use crate::data::DataConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-3,
            weight_decay: 0.05,
            batch_size: 64,
            warmup_epochs: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingName {
    Importance,
    Uniform,
    ClassToken,
    RandomTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpacSection {
    pub proxy_size: usize,
    pub weighting: WeightingName,
    /// Tokens per image for the random-token weighting.
    pub random_tokens: usize,
    pub ridge: f64,
    pub chunk: usize,
}

impl Default for WpacSection {
    fn default() -> Self {
        Self {
            proxy_size: 256,
            weighting: WeightingName::Importance,
            random_tokens: 4,
            ridge: 0.0,
            chunk: 64,
        }
    }
}

impl WpacSection {
    pub fn weighting(&self, name: WeightingName, seed: u64) -> Weighting {
        match name {
            WeightingName::Importance => Weighting::Importance,
            WeightingName::Uniform => Weighting::Uniform,
            WeightingName::ClassToken => Weighting::ClassToken,
            WeightingName::RandomTokens => Weighting::RandomTokens {
                count: self.random_tokens,
                seed,
            },
        }
    }

    pub fn core(&self, seed: u64) -> WpacConfig {
        WpacConfig {
            weighting: self.weighting(self.weighting, seed),
            ridge: self.ridge,
            chunk: self.chunk,
            ..WpacConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub ratios: Vec<f64>,
    pub proxy_sizes: Vec<usize>,
    pub eval_chunk: usize,
    /// Training samples used by super-network runs (0 = whole train split).
    pub piad_train_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_seed: 2024,
            seeds: vec![0, 1, 2, 3, 4],
            ratios: vec![0.25, 0.5, 0.75],
            proxy_sizes: vec![16, 64, 256, 1024],
            eval_chunk: 200,
            piad_train_samples: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub wpac: WpacSection,
    pub piad: PiadConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.piad.validate()?;
        if self.arch.image_size != self.data.image_size {
            return Err(Error::Invalid(format!(
                "arch.image_size {} differs from data.image_size {}",
                self.arch.image_size, self.data.image_size
            )));
        }
        if self.arch.channels != 1 {
            return Err(Error::Invalid("the synthetic dataset is single-channel".into()));
        }
        if self.arch.num_classes != crate::data::CLASS_NAMES.len() {
            return Err(Error::Invalid(format!(
                "arch.num_classes must be {}",
                crate::data::CLASS_NAMES.len()
            )));
        }
        if self.train.batch_size == 0 || self.wpac.chunk == 0 || self.experiment.eval_chunk == 0 {
            return Err(Error::Invalid("batch and chunk sizes must be positive".into()));
        }
        if self.wpac.proxy_size == 0 {
            return Err(Error::Invalid("wpac.proxy_size must be positive".into()));
        }
        if self.experiment.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Invalid("keep ratios must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = Config::from_toml("[train]\nepochs = 3\n[wpac]\nweighting = \"class-token\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.wpac.weighting, WeightingName::ClassToken);
        assert_eq!(cfg.arch, ArchConfig::default());
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = Config::default();
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.train.lr = 0.5;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml("[arch]\nmlp_hidden = 130\n").is_err());
        assert!(Config::from_toml("[arch]\nimage_size = 16\n").is_err());
        assert!(Config::from_toml("[piad]\nprogressive_epochs = 50\n").is_err());
        assert!(Config::from_toml("[bogus\n").is_err());
        assert!(Config::from_toml("[experiment]\nratios = [0.0]\n").is_err());
        assert!(Config::from_toml("[train]\nepochz = 3\n").is_err());
        assert!(Config::from_toml("[nonsense]\n").is_err());
    }
}
