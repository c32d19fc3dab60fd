use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cpg::LangVecMode;
use crate::encoder::EncoderConfig;
use crate::numcore::AdamConfig;
use crate::parser::Smoothing;

/// Which parameter groups are produced by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CpgMode {
    /// Plain shared adapters and biaffine scorer, no language conditioning.
    Off,
    Adapters,
    Biaffine,
    Both,
}

impl CpgMode {
    pub fn generates_adapters(self) -> bool {
        matches!(self, CpgMode::Adapters | CpgMode::Both)
    }

    pub fn generates_biaffine(self) -> bool {
        matches!(self, CpgMode::Biaffine | CpgMode::Both)
    }

    pub fn conditioned(self) -> bool {
        self != CpgMode::Off
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Frozen,
    Trainable,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training and model hyperparameters. Read from TOML; any missing key takes
/// its default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Base rate for a trainable backbone; `lr` when unset.
    pub backbone_lr: Option<f64>,
    /// Fraction of the total number of optimizer steps spent warming up.
    pub warmup_ratio: f64,
    /// Overrides `warmup_ratio` when set.
    pub warmup_steps: Option<u64>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Stop once dev macro LAS reaches this value.
    pub early_stop_las: Option<f64>,
    pub dropout: f64,
    pub encoder_dropout: f64,
    pub mask_prob: f64,
    pub arc_smoothing: f64,
    pub label_smoothing: f64,
    pub adam: AdamConfig,

    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub maxlen: usize,
    pub adapter_size: usize,
    pub arc_dim: usize,
    pub label_dim: usize,
    pub lang_dim: usize,
    pub lang_hidden: usize,

    pub cpg_mode: CpgMode,
    pub backbone: Backbone,
    /// `typology` or `learned`; the fallback modes only apply at inference.
    pub langvec_mode: LangVecMode,
    /// Per-language cap on training sentences (first sentences kept).
    pub max_sentences: BTreeMap<String, usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::desk();
        TrainConfig {
            epochs: 80,
            batch_size: 32,
            lr: 1e-3,
            backbone_lr: None,
            warmup_ratio: 1.0 / 80.0,
            warmup_steps: None,
            max_steps: None,
            early_stop_las: None,
            dropout: 0.5,
            encoder_dropout: 0.2,
            mask_prob: 0.2,
            arc_smoothing: 0.03,
            label_smoothing: 0.03,
            adam: AdamConfig::default(),
            d_model: enc.d_model,
            layers: enc.layers,
            heads: enc.heads,
            ff: enc.ff,
            maxlen: enc.maxlen,
            adapter_size: enc.adapter,
            arc_dim: 128,
            label_dim: 64,
            lang_dim: 32,
            lang_hidden: 64,
            cpg_mode: CpgMode::Both,
            backbone: Backbone::Frozen,
            langvec_mode: LangVecMode::Typology,
            max_sentences: BTreeMap::new(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Scorer and adapter sizes of the original large-scale setup.
    pub fn large_sizes() -> Self {
        TrainConfig {
            adapter_size: 256,
            arc_dim: 768,
            label_dim: 256,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: TrainConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.adapter_size == 0 || self.adapter_size >= self.d_model {
            return bad("adapter_size must be in 1..d_model");
        }
        if [self.layers, self.ff, self.arc_dim, self.label_dim, self.lang_dim, self.lang_hidden]
            .contains(&0)
        {
            return bad("layer counts and widths must be positive");
        }
        if self.maxlen < 2 {
            return bad("maxlen must be at least 2");
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("encoder_dropout", self.encoder_dropout),
            ("mask_prob", self.mask_prob),
            ("arc_smoothing", self.arc_smoothing),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&p) && !(name == "mask_prob" && p == 1.0) {
                return Err(ConfigError::Invalid(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.lr > 0.0) || !(self.warmup_ratio > 0.0) || self.backbone_lr.is_some_and(|r| !(r > 0.0)) {
            return bad("lr, backbone_lr and warmup_ratio must be positive");
        }
        if !matches!(self.langvec_mode, LangVecMode::Typology | LangVecMode::Learned) {
            return bad("langvec_mode for training must be typology or learned");
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff: self.ff,
            maxlen: self.maxlen,
            adapter: self.adapter_size,
        }
    }

    pub fn smoothing(&self) -> Smoothing {
        Smoothing {
            arc: self.arc_smoothing,
            label: self.label_smoothing,
        }
    }

    /// Warm-up length for a run of `total_steps` optimizer steps.
    pub fn warmup_for(&self, total_steps: u64) -> u64 {
        self.warmup_steps
            .unwrap_or_else(|| (total_steps as f64 * self.warmup_ratio).round() as u64)
            .max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 80);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.warmup_ratio, 1.0 / 80.0);
        assert_eq!(c.dropout, 0.5);
        assert_eq!(c.encoder_dropout, 0.2);
        assert_eq!(c.mask_prob, 0.2);
        assert_eq!(c.label_smoothing, 0.03);
        assert_eq!(c.adam.weight_decay, 0.01);
        assert_eq!((c.adam.beta1, c.adam.beta2), (0.9, 0.99));
        assert_eq!(c.lang_dim, 32);
        assert_eq!(c.cpg_mode, CpgMode::Both);
        assert_eq!(c.backbone, Backbone::Frozen);
        let p = TrainConfig::large_sizes();
        assert_eq!((p.adapter_size, p.arc_dim, p.label_dim), (256, 768, 256));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("epochs = 3\ncpg_mode = \"off\"\nlangvec_mode = \"learned\"\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.cpg_mode, CpgMode::Off);
        assert_eq!(partial.langvec_mode, LangVecMode::Learned);
        assert_eq!(partial.batch_size, 32);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainConfig::from_toml("epochz = 3").is_err());
        assert!(TrainConfig::from_toml("heads = 3").is_err());
        assert!(TrainConfig::from_toml("langvec_mode = \"centroid\"").is_err());
        assert!(TrainConfig::from_toml("dropout = 1.5").is_err());
    }

    #[test]
    fn warmup_is_a_fraction_of_steps() {
        let c = TrainConfig::default();
        assert_eq!(c.warmup_for(8000), 100);
        assert_eq!(c.warmup_for(10), 1);
        let o = TrainConfig {
            warmup_steps: Some(7),
            ..c
        };
        assert_eq!(o.warmup_for(8000), 7);
    }
}
