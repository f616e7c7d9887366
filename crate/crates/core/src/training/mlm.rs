use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::OptimizerConfig;
use super::loss::label_smoothed_ce;
use super::trainer::{train_objective, Objective, TrainOptions, TrainOutcome};
use crate::error::{Error, Result};
use crate::model::{encoder_only_forward, mlm_logits, HatParameters};
use crate::tensor::{Scalar, Session, Var};
use crate::text::{collate, EncodedExample, BOS_ID, NUM_RESERVED, PAD_ID};

/// Fraction of non-BOS tokens selected for prediction.
pub const MASK_PROB: f64 = 0.15;

/// A corrupted input and the positions the model must recover.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub example: EncodedExample,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

/// Selects each non-BOS token with probability 15% (at least one), then
/// replaces 80% of the selection with `mask_id`, 10% with a random
/// non-reserved id and leaves 10% unchanged.
pub fn mask_tokens(
    example: &EncodedExample,
    mask_id: u32,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> MaskedExample {
    let candidates: Vec<usize> = example
        .source_ids
        .iter()
        .enumerate()
        .filter(|&(_, &id)| id != BOS_ID && id != PAD_ID)
        .map(|(i, _)| i)
        .collect();
    let mut positions: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random_bool(MASK_PROB))
        .collect();
    if positions.is_empty() && !candidates.is_empty() {
        positions.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let mut corrupted = example.clone();
    corrupted.target_ids.clear();
    let targets = positions.iter().map(|&p| example.source_ids[p]).collect();
    for &p in &positions {
        let r: f64 = rng.random();
        if r < 0.8 {
            corrupted.source_ids[p] = mask_id;
        } else if r < 0.9 {
            corrupted.source_ids[p] = rng.random_range(NUM_RESERVED..vocab_size as u32);
        }
    }
    MaskedExample {
        example: corrupted,
        positions,
        targets,
    }
}

/// Masked-token cross-entropy for encoder-only models.
#[derive(Clone, Copy, Debug)]
pub struct MaskedLm {
    pub mask_id: u32,
}

impl<T: Scalar> Objective<T> for MaskedLm {
    fn loss(
        &self,
        s: &mut Session<'_, T>,
        params: &HatParameters<T>,
        examples: &[EncodedExample],
        noise: u64,
    ) -> Result<(Var, usize)> {
        let vocab = params.config.vocab_size;
        if self.mask_id as usize >= vocab {
            return Err(Error::invalid(format!(
                "mask id {} outside vocabulary of {vocab}",
                self.mask_id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(noise);
        let masked: Vec<MaskedExample> = examples
            .iter()
            .map(|e| mask_tokens(e, self.mask_id, vocab, &mut rng))
            .collect();
        let inputs: Vec<EncodedExample> = masked.iter().map(|m| m.example.clone()).collect();
        let batch = collate(&inputs, PAD_ID)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, m) in masked.iter().enumerate() {
            rows.extend(m.positions.iter().map(|&p| b * batch.src_len + p));
            targets.extend_from_slice(&m.targets);
        }
        if rows.is_empty() {
            return Err(Error::invalid("no maskable tokens in batch"));
        }
        let out = encoder_only_forward(s, params, &batch)?;
        let logits = mlm_logits(s, params, out.states, &rows)?;
        let loss = label_smoothed_ce(&mut s.graph, logits, &targets, 0.0, PAD_ID)?;
        Ok((loss, targets.len()))
    }
}

/// Pre-trains an encoder-only model with the masked-LM objective.
pub fn mlm_pretrain<T: Scalar>(
    params: HatParameters<T>,
    cfg: &OptimizerConfig,
    corpus: &[EncodedExample],
    valid: &[EncodedExample],
    mask_id: u32,
    opts: &TrainOptions<'_, T>,
) -> Result<TrainOutcome<T>> {
    if !params.config.mode.is_encoder_only() {
        return Err(Error::invalid(
            "masked-LM pre-training needs an encoder-only model",
        ));
    }
    train_objective(params, cfg, &MaskedLm { mask_id }, corpus, valid, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(n: usize) -> EncodedExample {
        let mut ids = vec![BOS_ID];
        ids.extend((0..n).map(|i| 10 + (i % 20) as u32));
        EncodedExample {
            segment_ids: vec![0; ids.len()],
            source_ids: ids,
            bos_positions: vec![0],
            target_ids: Vec::new(),
        }
    }

    #[test]
    fn masking_rates_and_bos_protection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = doc(2000);
        let (mut selected, mut masked, mut random, mut kept) = (0, 0, 0, 0);
        for _ in 0..20 {
            let m = mask_tokens(&ex, 4, 40, &mut rng);
            assert!(!m.positions.contains(&0));
            assert_eq!(m.example.source_ids[0], BOS_ID);
            for (&p, &t) in m.positions.iter().zip(&m.targets) {
                assert_eq!(t, ex.source_ids[p]);
                match m.example.source_ids[p] {
                    4 => masked += 1,
                    x if x == t => kept += 1,
                    _ => random += 1,
                }
            }
            selected += m.positions.len();
        }
        let rate = selected as f64 / 40_000.0;
        assert!((rate - 0.15).abs() < 0.01, "{rate}");
        let frac = |c: usize| c as f64 / selected as f64;
        assert!((frac(masked) - 0.8).abs() < 0.02);
        // random draws occasionally hit the original id
        assert!((frac(random) - 0.1).abs() < 0.02);
        assert!((frac(kept) - 0.1).abs() < 0.02);
    }

    #[test]
    fn at_least_one_position_is_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(mask_tokens(&doc(1), 4, 40, &mut rng).positions, vec![1]);
        }
    }
}
