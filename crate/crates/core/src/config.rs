//! Model, decoder, and training configuration with the two named profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearize::DEFAULT_MAX_INPUT_LEN;
use crate::structure::{DEFAULT_D_CLIP, DEFAULT_P_CLIP};

pub const DEFAULT_MAX_GEN_LEN: usize = 128;

/// Structure switches for ablation runs. Disabled parts are zeroed, not
/// removed, so parameter counts match across arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub adjacency: bool,
    pub entity_bias: bool,
    pub word_module: bool,
    pub word_bias: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            adjacency: true,
            entity_bias: true,
            word_module: true,
            word_bias: true,
        }
    }
}

impl Ablation {
    /// Adjacency and every learned structure bias off.
    pub fn no_structure() -> Self {
        Ablation {
            adjacency: false,
            entity_bias: false,
            word_module: true,
            word_bias: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Layers in each granularity stack.
    pub n_layers: usize,
    /// Weight of the word-level stream in the aggregation.
    pub lambda: f64,
    pub d_clip: usize,
    pub p_clip: usize,
    pub max_input_len: usize,
    pub dropout: f64,
    pub ablation: Ablation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 768,
            n_heads: 12,
            n_layers: 6,
            lambda: 0.5,
            d_clip: DEFAULT_D_CLIP,
            p_clip: DEFAULT_P_CLIP,
            max_input_len: DEFAULT_MAX_INPUT_LEN,
            dropout: 0.1,
            ablation: Ablation::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::Config("d_model, n_heads and n_layers must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.d_clip == 0 || self.p_clip == 0 || self.max_input_len == 0 {
            return Err(Error::Config("clips and max_input_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_gen_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_heads: 12,
            n_layers: 6,
            max_gen_len: DEFAULT_MAX_GEN_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Group triples by head before linearizing.
    pub cluster: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            cluster: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = &self.decoder;
        if d.n_heads == 0 || d.n_layers == 0 || d.max_gen_len == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if !self.encoder.d_model.is_multiple_of(d.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by decoder n_heads {}",
                self.encoder.d_model, d.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub beam_width: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            learning_rate: 2e-5,
            warmup_steps: 1600,
            adam_epsilon: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            beam_width: 5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_instances: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.beam_width == 0 {
            return Err(Error::Config("epochs, batch_size and beam_width must be positive".into()));
        }
        if self.learning_rate < 0.0 || self.adam_epsilon <= 0.0 {
            return Err(Error::Config("learning_rate must be >= 0 and adam_epsilon > 0".into()));
        }
        let total = self.total_steps(num_instances);
        if self.warmup_steps > total {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total steps {total}",
                self.warmup_steps
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, num_instances: usize) -> usize {
        num_instances.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, num_instances: usize) -> usize {
        self.epochs * self.steps_per_epoch(num_instances)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// The published hyperparameters at base-model width.
    Paper,
    /// Small width and a larger learning rate for toy runs on one core.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

impl Profile {
    pub fn model(self) -> ModelConfig {
        match self {
            Profile::Paper => ModelConfig::default(),
            Profile::Desk => ModelConfig {
                encoder: EncoderConfig {
                    d_model: 32,
                    n_heads: 2,
                    n_layers: 2,
                    dropout: 0.0,
                    ..EncoderConfig::default()
                },
                decoder: DecoderConfig {
                    n_heads: 2,
                    n_layers: 2,
                    ..DecoderConfig::default()
                },
                cluster: true,
            },
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Profile::Paper => TrainConfig::default(),
            Profile::Desk => TrainConfig {
                batch_size: 4,
                learning_rate: 5e-4,
                warmup_steps: 0,
                ..TrainConfig::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let m = Profile::Paper.model();
        let t = Profile::Paper.train();
        assert_eq!(m.encoder.lambda, 0.5);
        assert_eq!(m.encoder.max_input_len, 256);
        assert_eq!(m.decoder.max_gen_len, 128);
        assert_eq!((t.epochs, t.batch_size, t.warmup_steps, t.beam_width), (40, 16, 1600, 5));
        assert_eq!(t.learning_rate, 2e-5);
        assert_eq!(t.adam_epsilon, 1e-8);
    }

    #[test]
    fn desk_profile_is_valid() {
        let m = Profile::Desk.model();
        m.validate().unwrap();
        assert_eq!(m.encoder.d_model, 32);
        assert_eq!(Profile::Desk.train().learning_rate, 5e-4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut m = Profile::Desk.model();
        m.encoder.n_heads = 3;
        assert!(m.validate().is_err());
        let mut m = Profile::Desk.model();
        m.encoder.lambda = 1.5;
        assert!(m.validate().is_err());
        // 16 instances, batch 16 -> 40 steps, warmup 1600 too long
        assert!(Profile::Paper.train().validate(16).is_err());
        assert!(Profile::Desk.train().validate(16).is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<EncoderConfig, _> = serde_json::from_str(r#"{"d_model": 8, "bogus": 1}"#);
        assert!(r.is_err());
        let ok: EncoderConfig = serde_json::from_str(r#"{"d_model": 8}"#).unwrap();
        assert_eq!(ok.n_heads, 12);
    }
}
