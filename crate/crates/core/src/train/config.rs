//! Training hyperparameters, read from TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsma::DEFAULT_MA_ALPHA;

/// Dataset-size presets for the consistency-loss weight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Four emotion classes.
    #[default]
    FourClass,
    /// Seven emotion classes.
    SevenClass,
}

impl Profile {
    pub fn apc_weight(self) -> f64 {
        match self {
            Profile::FourClass => 0.05,
            Profile::SevenClass => 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub ce_weight: f64,
    pub profile: Profile,
    /// Overrides the profile's weight when set.
    pub apc_weight: Option<f64>,
    pub ma_alpha: f64,
    pub d_model: usize,
    pub n_heads: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub disable_ma: bool,
    pub disable_joo: bool,
    pub disable_lsma: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 50,
            ce_weight: 1.0,
            profile: Profile::FourClass,
            apc_weight: None,
            ma_alpha: DEFAULT_MA_ALPHA,
            d_model: 256,
            n_heads: 4,
            seed: 0,
            batch_size: 16,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            disable_ma: false,
            disable_joo: false,
            disable_lsma: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Weight of the consistency term before the ablation switch.
    pub fn configured_apc_weight(&self) -> f64 {
        self.apc_weight.unwrap_or_else(|| self.profile.apc_weight())
    }

    /// Weight actually applied to the consistency term.
    pub fn effective_apc_weight(&self) -> f64 {
        if self.disable_joo {
            0.0
        } else {
            self.configured_apc_weight()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [("lr", self.lr), ("adam_eps", self.adam_eps)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let nonneg = [
            ("ce_weight", self.ce_weight),
            ("apc_weight", self.configured_apc_weight()),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ma_alpha) {
            return bad(format!(
                "ma_alpha must lie in [0, 1], got {}",
                self.ma_alpha
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad(format!(
                "d_model {} must be even (two LSTM directions)",
                self.d_model
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::from_toml("").unwrap();
        assert_eq!(c.lr, 5e-4);
        assert_eq!(c.epochs, 50);
        assert_eq!(c.ce_weight, 1.0);
        assert_eq!(c.effective_apc_weight(), 0.05);
        assert_eq!(c.ma_alpha, 0.99);
        assert_eq!(
            (c.beta1, c.beta2, c.adam_eps, c.weight_decay),
            (0.9, 0.999, 1e-8, 0.01)
        );
    }

    #[test]
    fn profile_override_and_joo_switch() {
        let c = TrainConfig::from_toml("profile = \"seven-class\"").unwrap();
        assert_eq!(c.effective_apc_weight(), 0.1);
        let c = TrainConfig::from_toml("profile = \"seven-class\"\napc_weight = 0.3").unwrap();
        assert_eq!(c.effective_apc_weight(), 0.3);
        let c = TrainConfig {
            disable_joo: true,
            ..c
        };
        assert_eq!(c.effective_apc_weight(), 0.0);
        assert_eq!(c.configured_apc_weight(), 0.3);
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig {
            apc_weight: Some(0.125),
            seed: 9,
            disable_ma: true,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "lr = 0.0",
            "lr = -1.0",
            "batch_size = 0",
            "beta1 = 1.0",
            "d_model = 30\nn_heads = 4",
            "d_model = 9\nn_heads = 3",
            "ma_alpha = 1.5",
            "weight_decay = -0.1",
            "learning_rate = 0.1",
        ] {
            assert!(TrainConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
