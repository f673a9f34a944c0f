//! Run configuration: line-oriented `key = value` files and the ablation
//! mode switches.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::SimilarityMode;
use crate::fusion::FusionConfig;
use crate::vision::{AugKind, EncoderConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("malformed line {0:?}, expected `key = value`")]
    BadLine(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which modules are live for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    ModalityImage,
    ModalityText,
    ExpA,
    ExpB,
    ExpC,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "full" => Some(Mode::Full),
            "modality_image" => Some(Mode::ModalityImage),
            "modality_text" => Some(Mode::ModalityText),
            "expA" | "exp_a" => Some(Mode::ExpA),
            "expB" | "exp_b" => Some(Mode::ExpB),
            "expC" | "exp_c" => Some(Mode::ExpC),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::ModalityImage => "modality_image",
            Mode::ModalityText => "modality_text",
            Mode::ExpA => "expA",
            Mode::ExpB => "expB",
            Mode::ExpC => "expC",
        }
    }

    /// Contrastive branch trains and contributes L1.
    pub fn contrastive_live(self) -> bool {
        !matches!(self, Mode::ExpA | Mode::ModalityText)
    }

    /// Learnable-query alignment sits between encoder and LM; when off,
    /// raw patch features fill the image span.
    pub fn fusion_live(self) -> bool {
        !matches!(self, Mode::ExpA | Mode::ExpB)
    }

    pub fn use_image(self) -> bool {
        self != Mode::ModalityText
    }

    pub fn use_text(self) -> bool {
        self != Mode::ModalityImage
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub micro_batch: usize,
    pub accumulate: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    /// Momentum-encoder EMA coefficient.
    pub m: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub num_queries: usize,
    pub freeze_image_encoder: bool,
    pub mode: Mode,
    /// Augmentation kinds the contrastive pair sampler draws from.
    pub augs: Vec<AugKind>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub cls_hidden: usize,
    pub awl_symmetric: bool,
    pub sim_mode: SimilarityMode,
    /// Contrastive-only steps before joint training (0 = joint from the
    /// first step).
    pub pretrain_steps: usize,
    pub image_side: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub enc_layers: usize,
    pub lm_layers: usize,
    pub heads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            micro_batch: 16,
            accumulate: 6,
            lr: 1e-2,
            sgd_momentum: 0.9,
            m: 0.99,
            tau: 0.07,
            num_queries: 8,
            freeze_image_encoder: true,
            mode: Mode::Full,
            augs: AugKind::ALL.to_vec(),
            vocab_size: 512,
            max_len: 128,
            cls_hidden: 32,
            awl_symmetric: false,
            sim_mode: SimilarityMode::SumTranspose,
            pretrain_steps: 0,
            image_side: 32,
            patch_size: 8,
            model_dim: 64,
            enc_layers: 2,
            lm_layers: 2,
            heads: 4,
        }
    }
}

impl RunConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_side: self.image_side,
            patch_size: self.patch_size,
            model_dim: self.model_dim,
            layers: self.enc_layers,
            heads: self.heads,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            num_queries: self.num_queries,
            model_dim: self.model_dim,
            heads: self.heads,
            lm_layers: self.lm_layers,
            max_len: self.max_len,
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulate
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.micro_batch < 2 {
            return Err(ConfigError::Invalid("micro_batch must be >= 2".into()));
        }
        if self.accumulate == 0 {
            return Err(ConfigError::Invalid("accumulate must be >= 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(ConfigError::Invalid("tau must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.m) {
            return Err(ConfigError::Invalid("m must be in [0,1]".into()));
        }
        if self.augs.is_empty() {
            return Err(ConfigError::Invalid("augs must not be empty".into()));
        }
        self.encoder_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad())?,
            "micro_batch" => self.micro_batch = value.parse().map_err(|_| bad())?,
            "accumulate" => self.accumulate = value.parse().map_err(|_| bad())?,
            "lr" => self.lr = value.parse().map_err(|_| bad())?,
            "sgd_momentum" => self.sgd_momentum = value.parse().map_err(|_| bad())?,
            "m" => self.m = value.parse().map_err(|_| bad())?,
            "tau" => self.tau = value.parse().map_err(|_| bad())?,
            "num_queries" => self.num_queries = value.parse().map_err(|_| bad())?,
            "freeze_image_encoder" => {
                self.freeze_image_encoder = value.parse().map_err(|_| bad())?
            }
            "mode" => self.mode = Mode::parse(value).ok_or_else(bad)?,
            "augs" => {
                self.augs = value
                    .split(',')
                    .map(|v| AugKind::parse(v.trim()).map_err(|_| bad()))
                    .collect::<Result<Vec<_>, _>>()?
            }
            "vocab_size" => self.vocab_size = value.parse().map_err(|_| bad())?,
            "max_len" => self.max_len = value.parse().map_err(|_| bad())?,
            "cls_hidden" => self.cls_hidden = value.parse().map_err(|_| bad())?,
            "awl_symmetric" => self.awl_symmetric = value.parse().map_err(|_| bad())?,
            "sim_mode" => {
                self.sim_mode = match value {
                    "sum_transpose" => SimilarityMode::SumTranspose,
                    "sum_plain" => SimilarityMode::SumPlain,
                    _ => return Err(bad()),
                }
            }
            "pretrain_steps" => self.pretrain_steps = value.parse().map_err(|_| bad())?,
            "image_side" => self.image_side = value.parse().map_err(|_| bad())?,
            "patch_size" => self.patch_size = value.parse().map_err(|_| bad())?,
            "model_dim" => self.model_dim = value.parse().map_err(|_| bad())?,
            "enc_layers" => self.enc_layers = value.parse().map_err(|_| bad())?,
            "lm_layers" => self.lm_layers = value.parse().map_err(|_| bad())?,
            "heads" => self.heads = value.parse().map_err(|_| bad())?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses a line-oriented `key = value` file; `#` starts a comment.
    pub fn from_str(content: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for line in content.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(line.to_string()))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Short hash of the serialized config, stamped into ablation CSVs.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides_defaults() {
        let cfg = RunConfig::from_str("epochs = 3\nmode = expB\ntau = 0.2 # inline\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.mode, Mode::ExpB);
        assert!((cfg.tau - 0.2).abs() < 1e-12);
        assert_eq!(cfg.micro_batch, RunConfig::default().micro_batch);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            RunConfig::from_str("nope = 1\n"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::from_str("epochs = many\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_str("just a line\n"),
            Err(ConfigError::BadLine(_))
        ));
        assert!(RunConfig::from_str("tau = -1\n").is_err());
        assert!(RunConfig::from_str("micro_batch = 1\n").is_err());
        assert!(RunConfig::from_str("m = 1.5\n").is_err());
        assert!(RunConfig::from_str("image_side = 30\n").is_err());
    }

    #[test]
    fn mode_flags_encode_the_ablation_table() {
        // expA: LM + classifier only; expB adds contrastive; expC adds fusion
        assert!(!Mode::ExpA.contrastive_live() && !Mode::ExpA.fusion_live());
        assert!(Mode::ExpB.contrastive_live() && !Mode::ExpB.fusion_live());
        assert!(Mode::ExpC.contrastive_live() && Mode::ExpC.fusion_live());
        assert!(Mode::Full.contrastive_live() && Mode::Full.fusion_live());
        assert!(!Mode::ModalityImage.use_text() && Mode::ModalityImage.use_image());
        assert!(!Mode::ModalityText.use_image() && Mode::ModalityText.use_text());
        // no image branch means no image contrastive pairs
        assert!(!Mode::ModalityText.contrastive_live());
        for m in [Mode::Full, Mode::ExpA, Mode::ExpB, Mode::ExpC] {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.lr = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }
}
