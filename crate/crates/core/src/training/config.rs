use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Terms};

/// The registered objective combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    WceOnly,
    Blkd,
    Drkd,
    Crkd,
    Sskd,
    BlkdDrkd,
    BlkdCrkd,
    SskdDrkd,
    SskdCrkd,
    Dkd,
    SsdKd,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::WceOnly,
        Method::Blkd,
        Method::Drkd,
        Method::Crkd,
        Method::Sskd,
        Method::BlkdDrkd,
        Method::BlkdCrkd,
        Method::SskdDrkd,
        Method::SskdCrkd,
        Method::Dkd,
        Method::SsdKd,
    ];

    /// The ablation grid swept by default.
    pub const GRID: [Method; 10] = [
        Method::WceOnly,
        Method::Blkd,
        Method::Drkd,
        Method::Sskd,
        Method::BlkdDrkd,
        Method::BlkdCrkd,
        Method::SskdDrkd,
        Method::SskdCrkd,
        Method::Dkd,
        Method::SsdKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::WceOnly => "WCE-only",
            Method::Blkd => "BLKD",
            Method::Drkd => "DRKD",
            Method::Crkd => "CRKD",
            Method::Sskd => "SSKD",
            Method::BlkdDrkd => "BLKD+DRKD",
            Method::BlkdCrkd => "BLKD+CRKD",
            Method::SskdDrkd => "SSKD+DRKD",
            Method::SskdCrkd => "SSKD+CRKD",
            Method::Dkd => "D-KD",
            Method::SsdKd => "SSD-KD",
        }
    }

    /// Terms combined by this method. Relation-only methods keep the
    /// weighted cross-entropy as their supervised anchor; SSKD builds on BLKD.
    pub fn terms(self) -> Terms {
        let t = |wce, blkd, drkd, crkd, sskd| Terms { wce, blkd, drkd, crkd, sskd };
        match self {
            Method::WceOnly => t(true, false, false, false, false),
            Method::Blkd => t(false, true, false, false, false),
            Method::Drkd => t(true, false, true, false, false),
            Method::Crkd => t(true, false, false, true, false),
            Method::Sskd => t(false, true, false, false, true),
            Method::BlkdDrkd => t(false, true, true, false, false),
            Method::BlkdCrkd => t(false, true, false, true, false),
            Method::SskdDrkd => t(false, true, true, false, true),
            Method::SskdCrkd => t(false, true, false, true, true),
            Method::Dkd => Terms::DKD,
            Method::SsdKd => Terms::SSDKD,
        }
    }

    /// Whether the teacher for this method is pretrained with the contrastive term.
    pub fn self_supervised(self) -> bool {
        self.terms().sskd
    }

    pub fn valid_names() -> String {
        Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim();
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(key))
            .ok_or_else(|| Error::Config(format!("unknown method `{key}`; valid methods: {}", Method::valid_names())))
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, momentum: 0.9, weight_decay: 0.001 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfSupervisionConfig {
    /// Augmented views per image.
    pub views: usize,
    pub temperature: f64,
    /// Weight of the contrastive term during teacher pretraining.
    pub contrastive_weight: f64,
}

impl Default for SelfSupervisionConfig {
    fn default() -> Self {
        Self { views: 4, temperature: 0.5, contrastive_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub method: Method,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub max_epochs: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub drop_last: bool,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub self_supervision: SelfSupervisionConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::SsdKd,
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            max_epochs: 150,
            lr_patience: 10,
            lr_factor: 0.1,
            early_stop_patience: 15,
            batch_size: 128,
            drop_last: false,
            seed: 0,
            augment: AugmentPolicy::default(),
            self_supervision: SelfSupervisionConfig::default(),
        }
    }
}

/// Channel-relation weight for the toy backbones, whose Gram matrices are
/// far smaller than those of the full-size pair.
pub const TOY_LAMBDA_CRKD: f64 = 1.0;

impl DistillConfig {
    /// Settings for the toy backbones on small synthetic corpora.
    pub fn toy() -> Self {
        Self {
            loss_weights: LossWeights { lambda_crkd: TOY_LAMBDA_CRKD, ..LossWeights::default() },
            optimizer: OptimizerConfig { learning_rate: 0.05, ..OptimizerConfig::default() },
            max_epochs: 30,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate.is_finite() && o.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", o.learning_rate)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", o.momentum)));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", o.weight_decay)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor must lie in (0, 1), got {}", self.lr_factor)));
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        let ss = &self.self_supervision;
        if ss.views < 2 || !(ss.temperature > 0.0 && ss.temperature.is_finite()) || !(ss.contrastive_weight >= 0.0) {
            return Err(Error::Config("self_supervision needs views >= 2, positive temperature, non-negative weight".into()));
        }
        let lw = &self.loss_weights;
        let terms = self.method.terms();
        for (on, lambda, name) in [
            (terms.blkd, lw.lambda_blkd, "lambda_blkd"),
            (terms.drkd, lw.lambda_drkd, "lambda_drkd"),
            (terms.crkd, lw.lambda_crkd, "lambda_crkd"),
            (terms.sskd, lw.lambda_sskd, "lambda_sskd"),
        ] {
            if on && lambda == 0.0 {
                return Err(Error::Config(format!("method {} uses a term whose weight {name} is 0", self.method)));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_patience: self.lr_patience,
            lr_factor: self.lr_factor,
            early_stop_patience: self.early_stop_patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        let err = "FitNet".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("SSD-KD") && err.contains("WCE-only"), "{err}");
    }

    #[test]
    fn defaults_validate() {
        DistillConfig::default().validate().unwrap();
        DistillConfig::toy().validate().unwrap();
        let bad = DistillConfig { lr_patience: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = toml::from_str::<DistillConfig>("max_epochs = 3\nbogus = 1").unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn zero_weight_for_used_term_is_a_config_error() {
        let mut c = DistillConfig { method: Method::Crkd, ..Default::default() };
        c.loss_weights.lambda_crkd = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
