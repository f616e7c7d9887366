use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the best checkpoint is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Lowest label-smoothed validation loss.
    #[default]
    Loss,
    /// Highest ROUGE-L F1 of generated validation outputs.
    Rouge,
    /// Highest corpus BLEU of generated validation outputs.
    Bleu,
}

/// Optimizer and training-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum_steps: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    /// Examples per micro-batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Optimizer steps between validations.
    #[serde(default = "default_valid_every")]
    pub valid_every: usize,
    #[serde(default)]
    pub selection: Selection,
    /// Per-epoch dropout overrides: entry `i` replaces `dropout` during
    /// epoch `i`; later epochs use `dropout`.
    #[serde(default)]
    pub dropout_schedule: Vec<f64>,
}

fn default_valid_every() -> usize {
    100
}

impl OptimizerConfig {
    /// Summarization recipe: Adam (0.9, 0.999, 1e-8), weight decay 0.01,
    /// 900 warmup steps to 3e-5, linear decay, label smoothing 0.1.
    pub fn summarization() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            peak_lr: 3e-5,
            warmup_steps: 900,
            total_steps: 30_000,
            grad_accum_steps: 1,
            label_smoothing: 0.1,
            dropout: 0.1,
            batch_size: 128,
            seed: 0,
            valid_every: 1000,
            selection: Selection::Loss,
            dropout_schedule: Vec::new(),
        }
    }

    /// Translation recipe: Adam (0.9, 0.98, 1e-6), selected by BLEU.
    pub fn translation() -> Self {
        OptimizerConfig {
            beta2: 0.98,
            epsilon: 1e-6,
            selection: Selection::Bleu,
            ..Self::summarization()
        }
    }

    /// Small-model defaults for desk-scale runs.
    pub fn desk() -> Self {
        OptimizerConfig {
            peak_lr: 1e-3,
            warmup_steps: 50,
            total_steps: 500,
            batch_size: 8,
            dropout: 0.0,
            valid_every: 50,
            ..Self::summarization()
        }
    }

    pub fn dropout_for_epoch(&self, epoch: usize) -> f64 {
        self.dropout_schedule
            .get(epoch)
            .copied()
            .unwrap_or(self.dropout)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {v}"
                )))
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        unit("label_smoothing", self.label_smoothing)?;
        unit("dropout", self.dropout)?;
        for &p in &self.dropout_schedule {
            unit("dropout_schedule entry", p)?;
        }
        if !(self.epsilon > 0.0) || !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "epsilon and peak_lr must be positive, weight_decay non-negative",
            ));
        }
        if self.total_steps == 0
            || self.grad_accum_steps == 0
            || self.batch_size == 0
            || self.valid_every == 0
        {
            return Err(Error::invalid(
                "total_steps, grad_accum_steps, batch_size and valid_every must be positive",
            ));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: OptimizerConfig = toml::from_str(&text).map_err(|e| Error::Toml {
            path: path.to_owned(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for cfg in [
            OptimizerConfig::summarization(),
            OptimizerConfig::translation(),
            OptimizerConfig::desk(),
        ] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_values() {
        let base = OptimizerConfig::desk();
        let bad = [
            OptimizerConfig {
                label_smoothing: 1.0,
                ..base.clone()
            },
            OptimizerConfig {
                warmup_steps: 501,
                ..base.clone()
            },
            OptimizerConfig {
                grad_accum_steps: 0,
                ..base.clone()
            },
            OptimizerConfig {
                epsilon: 0.0,
                ..base.clone()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn toml_round_trip_and_schedule() {
        let cfg = OptimizerConfig {
            dropout_schedule: vec![0.0],
            ..OptimizerConfig::summarization()
        };
        let back: OptimizerConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.dropout_for_epoch(0), 0.0);
        assert_eq!(cfg.dropout_for_epoch(1), 0.1);
    }
}
