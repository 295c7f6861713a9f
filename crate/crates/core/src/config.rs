//! Run configuration documents.
//!
//! A run config is one JSON object with the stem, the harness and the seeds.
//! Unknown keys are rejected at every level. The adaptive unit's bounds are
//! never stored; they are recomputed from `model` on load.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aape::AapeConfig;
use crate::error::{ensure, Result};
use crate::sblu::Bounds;
use crate::ssl::SslConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Keys initialisation and masking.
    pub seed: u64,
    /// Keys the synthetic training batch.
    pub data_seed: u64,
    pub model: AapeConfig,
    pub train: SslConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data_seed: 7,
            model: AapeConfig::toy(),
            train: SslConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            Invalid,
            "schema_version {} unsupported (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        self.model.validate()?;
        self.train.validate(self.model.d)?;
        self.train
            .masks
            .check_grid(self.model.freq_patches(), self.model.time_patches())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn bounds(&self) -> Result<Bounds> {
        self.model.sblu().bounds()
    }

    /// Lower-case hex SHA-256 of the compact JSON serialisation.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_stability() {
        let c = RunConfig::toy();
        let back = RunConfig::parse(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.sha256(), c.sha256());
        assert_eq!(c.sha256().len(), 64);
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.sha256(), c.sha256());
    }

    #[test]
    fn rejects_unknown_keys_and_stored_bounds() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy().to_json()).unwrap();
        v["model"]["alpha_min"] = serde_json::json!(1.0);
        assert!(RunConfig::parse(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy().to_json()).unwrap();
        v["extra"] = serde_json::json!(0);
        assert!(RunConfig::parse(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::toy().to_json()).unwrap();
        v["train"]["masks"]["bogus"] = serde_json::json!(true);
        assert!(RunConfig::parse(&v.to_string()).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = RunConfig::toy();
        c.schema_version = 99;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.model.p_time = 5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::toy();
        c.train.masks.blocks = vec![(9, 9)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn bounds_are_recomputed() {
        let b = RunConfig::toy().bounds().unwrap();
        assert!(b.alpha_min > 0.0 && b.beta_min < b.beta_max);
    }
}
