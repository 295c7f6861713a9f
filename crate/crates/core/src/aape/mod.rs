//! The aliasing-aware patch-embedding stem.
//!
//! Layout conventions, fixed for every serialised artefact:
//!
//! - tokens are ordered frequency-patch major: token `n = f * T~ + t`;
//! - the hidden axis of the adaptive unit is grouped by frequency patch:
//!   `h = f * (H / F~) + j`;
//! - alias channels are grouped the same way: `channel = f * C~ + c`.

pub mod highpass;
pub mod posembed;
pub mod stats;
pub mod stem;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::sblu::SbluConfig;

pub use stem::{Stem, StemOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AapeConfig {
    /// Mel bands.
    pub f: usize,
    /// Frames at the positional table's reference length.
    pub t: usize,
    pub p_freq: usize,
    pub p_time: usize,
    /// Token width.
    pub d: usize,
    /// Lambda-encoder width reduction `D / r`.
    pub r: usize,
    /// Lambda-encoder depth.
    pub lambda_depth: usize,
    pub lambda_heads: usize,
    pub mlp_ratio: usize,
    /// Hidden channels of the adaptive unit.
    pub h: usize,
    /// Output channels of the adaptive unit.
    pub c: usize,
    pub kernel: usize,
    /// Frame hop in seconds.
    pub delta: f64,
    /// Kernel-edge tolerance defining the decay floor.
    pub epsilon: f64,
    /// `false` replaces the Lambda Encoder with static per-channel poles.
    pub adaptive: bool,
}

impl AapeConfig {
    pub fn full() -> Self {
        AapeConfig {
            f: 128,
            t: 608,
            p_freq: 16,
            p_time: 16,
            d: 768,
            r: 6,
            lambda_depth: 3,
            lambda_heads: 2,
            mlp_ratio: 4,
            h: 128,
            c: 1024,
            kernel: 63,
            delta: 0.01,
            epsilon: 0.01,
            adaptive: true,
        }
    }

    /// Desk-scale stem used by the pretraining harness.
    pub fn toy() -> Self {
        AapeConfig {
            f: 32,
            t: 64,
            p_freq: 4,
            p_time: 4,
            d: 48,
            r: 6,
            lambda_depth: 3,
            lambda_heads: 2,
            mlp_ratio: 4,
            h: 16,
            c: 32,
            kernel: 15,
            delta: 0.01,
            epsilon: 0.01,
            adaptive: true,
        }
    }

    /// Smallest stem used for end-to-end gradient checks.
    pub fn reduced() -> Self {
        AapeConfig {
            f: 16,
            t: 64,
            p_freq: 4,
            p_time: 4,
            d: 24,
            r: 6,
            lambda_depth: 3,
            lambda_heads: 1,
            mlp_ratio: 4,
            h: 8,
            c: 16,
            kernel: 7,
            delta: 0.01,
            epsilon: 0.01,
            adaptive: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.p_freq > 0 && self.f.is_multiple_of(self.p_freq),
            Invalid,
            "F={} not divisible by P_freq={}",
            self.f,
            self.p_freq
        );
        ensure!(
            self.p_time > 0 && self.t.is_multiple_of(self.p_time),
            Invalid,
            "T={} not divisible by P_time={}",
            self.t,
            self.p_time
        );
        let fg = self.f / self.p_freq;
        ensure!(
            self.h.is_multiple_of(fg),
            Invalid,
            "H={} not divisible by F~={fg}",
            self.h
        );
        ensure!(
            self.c.is_multiple_of(fg),
            Invalid,
            "C={} not divisible by F~={fg}",
            self.c
        );
        ensure!(
            self.r > 0 && self.d.is_multiple_of(self.r),
            Invalid,
            "D={} not divisible by r={}",
            self.d,
            self.r
        );
        ensure!(
            self.d.is_multiple_of(4),
            Invalid,
            "D={} must be divisible by 4 for the 2-D sin-cos embedding",
            self.d
        );
        ensure!(
            self.lambda_heads > 0 && (self.d / self.r).is_multiple_of(self.lambda_heads),
            Invalid,
            "lambda width {} not divisible by {} heads",
            self.d / self.r,
            self.lambda_heads
        );
        ensure!(
            self.lambda_depth > 0 && self.mlp_ratio > 0,
            Invalid,
            "lambda depth and MLP ratio must be positive"
        );
        self.sblu().validate()
    }

    pub fn sblu(&self) -> SbluConfig {
        SbluConfig {
            delta: self.delta,
            kernel: self.kernel,
            hidden: self.h,
            inputs: self.f,
            outputs: self.c,
            epsilon: self.epsilon,
            p_time: self.p_time,
            p_freq: self.p_freq,
        }
    }

    /// `F~`, the number of frequency patches.
    pub fn freq_patches(&self) -> usize {
        self.f / self.p_freq
    }

    /// `T~` at the reference length.
    pub fn time_patches(&self) -> usize {
        self.t / self.p_time
    }

    pub fn tokens(&self) -> usize {
        self.freq_patches() * self.time_patches()
    }

    /// `C~ = C / F~`.
    pub fn alias_width(&self) -> usize {
        self.c / self.freq_patches()
    }

    pub fn lambda_width(&self) -> usize {
        self.d / self.r
    }

    /// `(alpha, beta)` pairs estimated per patch, `H / F~`.
    pub fn pairs_per_patch(&self) -> usize {
        self.h / self.freq_patches()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [AapeConfig::full(), AapeConfig::toy(), AapeConfig::reduced()] {
            c.validate().unwrap();
            assert_eq!(2 * c.pairs_per_patch(), 2 * c.h / c.freq_patches());
        }
        let p = AapeConfig::full();
        assert_eq!(
            (p.freq_patches(), p.time_patches(), p.tokens()),
            (8, 38, 304)
        );
        assert_eq!(p.alias_width(), 128);
        assert_eq!(p.pairs_per_patch(), 16);
        assert_eq!(p.d + p.alias_width(), 896);
    }

    #[test]
    fn divisibility_violations() {
        let mut c = AapeConfig::toy();
        c.t = 30;
        assert!(c.validate().is_err());
        let mut c = AapeConfig::toy();
        c.h = 10;
        assert!(c.validate().is_err());
        let mut c = AapeConfig::toy();
        c.c = 30;
        assert!(c.validate().is_err());
        let mut c = AapeConfig::toy();
        c.d = 50;
        assert!(c.validate().is_err());
        let mut c = AapeConfig::toy();
        c.kernel = 8;
        assert!(c.validate().is_err());
    }
}
