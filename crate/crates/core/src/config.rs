// SPDX-License-Identifier: Apache-2.0

//! Training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationParams;
use crate::losses::SceParams;
use crate::metrics::AbsentClassPolicy;
use crate::model::{FeatureSpec, SgdConfig};
use crate::{Error, Result};

/// Supervised objective on the labeled shots (and on source scans in stage zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FssLoss {
    #[default]
    Ce,
    /// Cross-entropy plus Lovász-softmax.
    CeLovasz,
    /// Cross-entropy plus triplet regularization on the last hidden layer.
    CeTriplet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// SSL weight in stage one, applied once the gate opens.
    pub omega0: f64,
    /// Weight of distillation on the shots in stage two.
    pub omega1: f64,
    /// Weight of the mixed-scan term in stage two.
    pub omega2: f64,
    /// Pseudo-validation mIoU that opens the SSL gate. Values above 1 keep it shut.
    pub gamma: f64,
    /// Keep SSL on once the gate has opened.
    pub gate_hysteresis: bool,
    /// Model selection period in epochs.
    pub eval_every: usize,
    pub pseudoval_size: usize,
    pub stage0_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Source scans per optimizer step in stage zero.
    pub stage0_batch: usize,
    /// Labeled shots per optimizer step in stages one and two.
    pub shot_batch: usize,
    /// Unlabeled scans pseudo-labeled per optimizer step in stage one.
    pub ssl_batch: usize,
    /// (unlabeled, source) pairs mixed per optimizer step in stage two.
    pub mix_batch: usize,
    /// Augment labeled scans (source and shots) before every supervised step.
    pub augment_train: bool,
    pub fss_loss: FssLoss,
    pub lovasz_weight: f64,
    pub triplet_weight: f64,
    pub triplet_margin: f64,
    pub triplet_max_anchors: usize,
    pub sce: SceParams,
    pub kd_temperature: f64,
    pub hidden: Vec<usize>,
    pub feature: FeatureSpec,
    pub miou_policy: AbsentClassPolicy,
    pub augment: AugmentationParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        TrainConfig {
            seed: 0,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            omega0: 0.5,
            omega1: 0.5,
            omega2: 0.5,
            gamma: 0.75,
            gate_hysteresis: true,
            eval_every: 50,
            pseudoval_size: 500,
            stage0_epochs: 30,
            stage1_epochs: 200,
            stage2_epochs: 300,
            stage0_batch: 4,
            shot_batch: 1,
            ssl_batch: 4,
            mix_batch: 1,
            augment_train: true,
            fss_loss: FssLoss::Ce,
            lovasz_weight: 1.0,
            triplet_weight: 0.1,
            triplet_margin: 1.0,
            triplet_max_anchors: 50,
            sce: SceParams::default(),
            kd_temperature: 1.0,
            hidden: vec![64, 64],
            feature: FeatureSpec::default(),
            miou_policy: AbsentClassPolicy::Exclude,
            augment: AugmentationParams::default(),
        }
    }
}

/// The gate value used by FSS-only ablations.
pub const GAMMA_UNREACHABLE: f64 = f64::INFINITY;

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("kd_temperature", self.kd_temperature),
            ("triplet_margin", self.triplet_margin),
            ("feature.radius", self.feature.radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("omega0", self.omega0),
            ("omega1", self.omega1),
            ("omega2", self.omega2),
            ("lovasz_weight", self.lovasz_weight),
            ("triplet_weight", self.triplet_weight),
            ("sce.alpha", self.sce.alpha),
            ("sce.beta", self.sce.beta),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.sce.clip_log < 0.0) {
            return Err(Error::Config("sce.clip_log must be negative".into()));
        }
        let counts = [
            ("eval_every", self.eval_every),
            ("pseudoval_size", self.pseudoval_size),
            ("stage0_batch", self.stage0_batch),
            ("shot_batch", self.shot_batch),
            ("ssl_batch", self.ssl_batch),
            ("mix_batch", self.mix_batch),
            ("triplet_max_anchors", self.triplet_max_anchors),
            ("feature.k", self.feature.k),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.augment
            .validate()
            .map_err(|e| Error::Config(format!("augment: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 8 bytes of SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
