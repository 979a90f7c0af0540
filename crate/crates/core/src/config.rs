//! Run configuration: model, training, data and output sections. Every
//! field has a default and the fully-defaulted config trains the
//! desk-scale model end to end on synthetic tiles.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::clcrp::DeformAttnConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub tile_size: usize,
    /// Common hidden width d of the perceiver, decoder and heads.
    pub hidden_dim: usize,
    pub num_queries: usize,
    pub encoder: EncoderConfig,
    pub deform: DeformAttnConfig,
    pub decoder: DecoderConfig,
    /// Ablations: identity pass-through instead of the deformable
    /// encoder; zero attention masks (plain cross attention); a 1x1
    /// convolution per-pixel classifier replacing decoder and mask head;
    /// strict two-logit classification without a no-object class.
    pub disable_deform_mhsa: bool,
    pub disable_masked_attention: bool,
    pub per_pixel_head: bool,
    pub two_logit_classes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tile_size: 64,
            hidden_dim: 64,
            num_queries: 75,
            encoder: EncoderConfig::default(),
            deform: DeformAttnConfig::default(),
            decoder: DecoderConfig::default(),
            disable_deform_mhsa: false,
            disable_masked_attention: false,
            per_pixel_head: false,
            two_logit_classes: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let div = self.encoder.required_divisor();
        if self.tile_size % div != 0 {
            return Err(Error::Config(format!(
                "tile_size {} must be divisible by {div}",
                self.tile_size
            )));
        }
        if self.hidden_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by 4",
                self.hidden_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Cosine annealing floor.
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Seeded horizontal/vertical flips.
    pub augment: bool,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            lr_floor: 1e-7,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 4,
            steps: 500,
            seed: 8888,
            weights: LossWeights::default(),
            augment: false,
            checkpoint_every: 100,
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root with `<split>/A|B|label/*.png`; unused when
    /// `synthetic` is set.
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    pub synthetic: bool,
    pub synthetic_train_tiles: usize,
    pub synthetic_val_tiles: usize,
    pub synthetic_shapes: usize,
    /// Threshold non-binary labels at 128 instead of rejecting them.
    pub lenient_labels: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_split: "train".into(),
            val_split: "val".into(),
            synthetic: false,
            synthetic_train_tiles: 8,
            synthetic_val_tiles: 4,
            synthetic_shapes: 4,
            lenient_labels: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OutputConfig {
    /// Run directories are created under this root; the environment
    /// variable MASKCD_RUN_ROOT overrides it.
    pub run_root: PathBuf,
    pub run_name: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            run_root: PathBuf::from("runs"),
            run_name: "run".into(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn model_config_toml(cfg: &ModelConfig) -> String {
    toml::to_string_pretty(cfg).expect("model config serializes")
}

pub fn model_config_from_toml(text: &str) -> Result<ModelConfig> {
    toml::from_str(text).map_err(|e| Error::Config(format!("model config parse error: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.model.validate().unwrap();
        assert_eq!(cfg.train.lr, 5e-5);
        assert_eq!(cfg.train.seed, 8888);
        assert_eq!(cfg.model.num_queries, 75);
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 7\n[model]\nnum_queries = 25\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.model.num_queries, 25);
        assert_eq!(cfg.train.lr, 5e-5);
    }

    #[test]
    fn invalid_model_config_names_the_field() {
        let err = RunConfig::from_toml("[model]\nhidden_dim = 65\n").unwrap_err();
        assert!(err.to_string().contains("hidden_dim"));
        let err = RunConfig::from_toml("[model]\ntile_size = 50\n").unwrap_err();
        assert!(err.to_string().contains("tile_size"));
        let err = RunConfig::from_toml("[train]\nsteps = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("steps"));
    }
}
