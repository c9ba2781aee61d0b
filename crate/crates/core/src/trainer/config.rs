use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticParams;
use crate::error::{Error, Result};

/// Which discriminative term accompanies the binary cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Pull toward the own center, push away from co-occurring centers.
    Mcl,
    /// Pull only.
    ClOnly,
    /// Push only.
    ColOnly,
    /// No feature term; centers stay fixed.
    BceOnly,
    /// Softmax cross-entropy of the head applied to each class feature.
    MulticlassCe,
}

impl LossMode {
    pub fn uses_centers(self) -> bool {
        matches!(self, LossMode::Mcl | LossMode::ClOnly | LossMode::ColOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticParams),
    Manifest { train: PathBuf, val: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticParams::default())
    }
}

/// Every hyperparameter of a run. Missing fields take their defaults,
/// unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataSource,
    pub channels: usize,
    pub grid: usize,
    pub mixing_layers: usize,
    /// Length-normalize class features before the center-based terms.
    pub normalize_features: bool,
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub center_alpha: f64,
    pub loss_mode: LossMode,
    /// Write `checkpoints/epoch_{N}.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataSource::default(),
            channels: 32,
            grid: 14,
            mixing_layers: 2,
            normalize_features: true,
            beta: 2.0,
            batch_size: 16,
            epochs: 100,
            base_lr: 0.01,
            lr_decay: 0.1,
            lr_step: 30,
            momentum: 0.9,
            weight_decay: 1e-4,
            center_alpha: 0.5,
            loss_mode: LossMode::Mcl,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("field `{field}`: {why}")));
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if self.grid == 0 {
            return bad("grid", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.lr_step == 0 {
            return bad("lr_step", "must be positive");
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("lr_decay", self.lr_decay),
            ("center_alpha", self.center_alpha),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("beta", self.beta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(name, "must be finite and non-negative");
            }
        }
        if self.momentum >= 1.0 {
            return bad("momentum", "must be below 1");
        }
        if let DataSource::Synthetic(p) = &self.data {
            p.validate()?;
            if p.grid_size != self.grid {
                return bad("grid", "must equal the synthetic grid_size");
            }
        }
        Ok(())
    }

    /// `base_lr · decay^⌊epoch / step⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay.powi((epoch / self.lr_step) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(29), 0.01);
        assert!((c.lr_at(30) - 0.001).abs() < 1e-18);
        assert!((c.lr_at(95) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn lr_drop_count() {
        let c = TrainConfig::default();
        for epochs in [1usize, 30, 31, 60, 61, 100] {
            let drops = (1..epochs).filter(|&e| c.lr_at(e) != c.lr_at(e - 1)).count();
            assert_eq!(drops, (epochs - 1) / 30);
        }
    }

    #[test]
    fn json_defaults_and_rejection() {
        let c = TrainConfig::from_json(r#"{"seed": 3, "loss_mode": "bce_only"}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.loss_mode, LossMode::BceOnly);
        assert_eq!(c.channels, 32);

        let e = TrainConfig::from_json(r#"{"sede": 3}"#).unwrap_err();
        assert!(e.to_string().contains("sede"), "{e}");
        let e = TrainConfig::from_json(r#"{"batch_size": 0}"#).unwrap_err();
        assert!(e.to_string().contains("batch_size"), "{e}");
        let e = TrainConfig::from_json(r#"{"data": {"synthetic": {"clases": 3}}}"#).unwrap_err();
        assert!(e.to_string().contains("clases"), "{e}");
    }

    #[test]
    fn round_trip() {
        let c = TrainConfig {
            data: DataSource::Manifest {
                train: "a".into(),
                val: "b".into(),
            },
            ..TrainConfig::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_json(&s).unwrap(), c);
    }
}
