use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Encoder-decoder with a hierarchical encoder layer and hierarchical
    /// cross-attention in every decoder layer.
    Hat,
    /// Plain encoder-decoder transformer.
    Plain,
    /// Encoder stack with hierarchical attention inside every layer.
    EncoderOnlyHat,
    EncoderOnlyPlain,
}

impl ModelMode {
    pub fn is_hierarchical(self) -> bool {
        matches!(self, ModelMode::Hat | ModelMode::EncoderOnlyHat)
    }

    pub fn is_encoder_only(self) -> bool {
        matches!(
            self,
            ModelMode::EncoderOnlyHat | ModelMode::EncoderOnlyPlain
        )
    }

    /// The same architecture without hierarchical components.
    pub fn plain(self) -> Self {
        match self {
            ModelMode::Hat | ModelMode::Plain => ModelMode::Plain,
            ModelMode::EncoderOnlyHat | ModelMode::EncoderOnlyPlain => ModelMode::EncoderOnlyPlain,
        }
    }
}

impl std::str::FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hat" => Ok(Self::Hat),
            "plain" => Ok(Self::Plain),
            "encoder_only_hat" => Ok(Self::EncoderOnlyHat),
            "encoder_only_plain" => Ok(Self::EncoderOnlyPlain),
            other => Err(Error::invalid(format!("unknown model mode `{other}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatConfig {
    pub mode: ModelMode,
    /// Encoder layers; the decoder has the same number.
    pub num_layers: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub num_heads: usize,
    /// Layers in the hierarchical encoder stack (hat mode only).
    #[serde(default = "default_hier_layers")]
    pub num_hier_layers: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_segments")]
    pub num_segments: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_hier_layers() -> usize {
    1
}

fn default_segments() -> usize {
    1
}

fn default_eps() -> f64 {
    1e-5
}

impl HatConfig {
    /// Large summarization model: 12+12 layers, d=1024, 16 heads, with the
    /// byte-level BPE vocabulary size and 3072 source positions.
    pub fn summarization_large(mode: ModelMode) -> Self {
        HatConfig {
            mode,
            num_layers: 12,
            hidden_size: 1024,
            ffn_size: 4096,
            num_heads: 16,
            num_hier_layers: 1,
            vocab_size: 50_265,
            max_positions: 3072,
            num_segments: 1,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
        .normalized()
    }

    /// 6+6 layer translation model, d=1024.
    pub fn translation_large(mode: ModelMode) -> Self {
        HatConfig {
            num_layers: 6,
            vocab_size: TRANSLATION_VOCAB,
            max_positions: 512,
            ..Self::summarization_large(mode)
        }
        .normalized()
    }

    /// 6+6 layer translation model, d=512, 4 heads.
    pub fn translation_small(mode: ModelMode) -> Self {
        HatConfig {
            hidden_size: 512,
            ffn_size: 1024,
            num_heads: 4,
            ..Self::translation_large(mode)
        }
        .normalized()
    }

    /// Small configuration for tests and desk-scale experiments.
    pub fn tiny(mode: ModelMode, vocab_size: usize) -> Self {
        HatConfig {
            mode,
            num_layers: 2,
            hidden_size: 8,
            ffn_size: 16,
            num_heads: 2,
            num_hier_layers: 1,
            vocab_size,
            max_positions: 64,
            num_segments: 2,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
        .normalized()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Drops hierarchical layer counts that the mode ignores.
    pub fn normalized(mut self) -> Self {
        if self.mode != ModelMode::Hat {
            self.num_hier_layers = 0;
        }
        self
    }

    /// The same configuration in the non-hierarchical mode.
    pub fn as_plain(&self) -> Self {
        HatConfig {
            mode: self.mode.plain(),
            ..self.clone()
        }
        .normalized()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("num_segments", self.num_segments),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.mode != ModelMode::Hat && self.num_hier_layers != 0 {
            return Err(Error::invalid(format!(
                "mode {:?} takes no hierarchical encoder layers",
                self.mode
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::invalid("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: HatConfig = toml::from_str(&text).map_err(|e| Error::Toml {
            path: path.to_owned(),
            source: e,
        })?;
        let cfg = cfg.normalized();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Assumed joined-dictionary size for the 40k-merge translation BPE.
pub const TRANSLATION_VOCAB: usize = 45_000;
