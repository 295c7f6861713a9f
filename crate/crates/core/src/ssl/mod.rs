//! Masked teacher-student pretraining at desk scale.
//!
//! The student sees the visible tokens of several masked views per sample;
//! an EMA teacher sees the full input and provides layer-pooled targets for
//! the masked positions, an utterance-level target for the class token, and
//! the views are tied together by a multi-view InfoNCE term.

pub mod ema;
pub mod losses;
pub mod masks;
pub mod model;
pub mod synth;
pub mod targets;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
pub use ema::{momentum, TeacherState};
pub use losses::LossReport;
pub use masks::{make_masks, BlockRole, MaskConfig, MaskViews, Placement};
pub use model::Model;
pub use train::{loss_csv, pretrain_fixed, pretrain_step, StepOutput, TrainState};

/// Harness hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub pred_width: usize,
    pub pred_depth: usize,
    pub pred_heads: usize,
    /// Width of the contrastive projection.
    pub proj_dim: usize,
    pub mlp_ratio: usize,
    pub masks: MaskConfig,
    /// Weight of the contrastive term.
    pub eta: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub lr: f64,
    pub lr_floor: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
    pub batch: usize,
}

impl SslConfig {
    /// Small encoder and predictor matching [`crate::aape::AapeConfig::toy`].
    pub fn toy() -> Self {
        SslConfig {
            enc_depth: 2,
            enc_heads: 4,
            pred_width: 32,
            pred_depth: 3,
            pred_heads: 4,
            proj_dim: 24,
            mlp_ratio: 4,
            masks: MaskConfig::default(),
            eta: 0.1,
            tau: 0.2,
            ema_start: 0.994,
            ema_end: 1.0,
            lr: 1e-3,
            lr_floor: 1e-5,
            warmup: 20,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            steps: 200,
            batch: 2,
        }
    }

    /// ViT-Base-sized encoder and predictor.
    pub fn full() -> Self {
        SslConfig {
            enc_depth: 12,
            enc_heads: 12,
            pred_width: 512,
            pred_depth: 3,
            pred_heads: 16,
            proj_dim: 384,
            lr: 5e-4,
            lr_floor: 1e-6,
            warmup: 10_000,
            steps: 400_000,
            batch: 64,
            ..Self::toy()
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        ensure!(
            self.enc_depth > 0 && self.pred_depth > 0,
            Invalid,
            "encoder and predictor depth must be positive"
        );
        ensure!(
            self.enc_heads > 0 && d.is_multiple_of(self.enc_heads),
            Invalid,
            "D={d} not divisible by {} heads",
            self.enc_heads
        );
        ensure!(
            self.pred_heads > 0 && self.pred_width.is_multiple_of(self.pred_heads),
            Invalid,
            "predictor width {} not divisible by {} heads",
            self.pred_width,
            self.pred_heads
        );
        ensure!(
            self.pred_width.is_multiple_of(4),
            Invalid,
            "predictor width must be divisible by 4"
        );
        ensure!(
            d.is_multiple_of(2) && self.proj_dim > 0,
            Invalid,
            "contrastive head needs even D and positive width"
        );
        ensure!(
            self.tau > 0.0 && self.eta >= 0.0,
            Invalid,
            "tau must be positive and eta non-negative"
        );
        ensure!(
            (0.0..=1.0).contains(&self.ema_start) && (0.0..=1.0).contains(&self.ema_end),
            Invalid,
            "EMA momenta must lie in [0, 1]"
        );
        ensure!(
            self.lr > 0.0 && self.lr_floor >= 0.0,
            Invalid,
            "learning rates must be positive"
        );
        ensure!(
            self.steps > 0 && self.batch > 0,
            Invalid,
            "steps and batch must be positive"
        );
        self.masks.validate()
    }
}
