//! Beam search with length penalty, length limits and EOS stopping.
//!
//! Lengths: `min_len`/`max_len` count generated tokens before EOS; the
//! length used in the penalty counts EOS too, so a finished hypothesis of
//! `n` content tokens scores `logprob / (n + 1)^α`.
//!
//! Each step expands every live beam over the vocabulary and ranks the
//! candidates by cumulative log-probability. EOS candidates ranked within
//! the top `beam_width` are finished; the `beam_width` best non-EOS
//! candidates stay live. At `max_len` only EOS remains allowed, and after
//! renormalization it costs nothing. Finished hypotheses are held aside and
//! the search ends once no live beam can still beat the best of them:
//! log-probabilities only fall, so a live beam is bounded by its current
//! log-probability at the most favourable reachable length.
//!
//! With `α = 0` a beam of one is exactly greedy decoding. With `α > 0` it
//! can look past greedy's EOS when a longer hypothesis might still score
//! higher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_step, EncoderOutput, HatParameters};
use crate::tensor::Scalar;
use crate::text::{BOS_ID, EOS_ID, PAD_ID};
use crate::viz::AttentionTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub beam_width: usize,
    pub length_penalty: f64,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub trace_attention: bool,
    #[serde(default = "default_bos")]
    pub bos_id: u32,
    #[serde(default = "default_eos")]
    pub eos_id: u32,
    /// Ids never generated.
    #[serde(default = "default_banned")]
    pub banned_ids: Vec<u32>,
}

fn default_bos() -> u32 {
    BOS_ID
}

fn default_eos() -> u32 {
    EOS_ID
}

fn default_banned() -> Vec<u32> {
    vec![PAD_ID, BOS_ID]
}

impl GenConfig {
    /// Summarization decoding: beam 2, α=1, 72..=966 tokens.
    pub fn summarization() -> Self {
        GenConfig {
            beam_width: 2,
            length_penalty: 1.0,
            min_len: 72,
            max_len: 966,
            trace_attention: false,
            bos_id: BOS_ID,
            eos_id: EOS_ID,
            banned_ids: default_banned(),
        }
    }

    /// Translation decoding: beam 4 until EOS, capped at `max_len`.
    pub fn translation(max_len: usize) -> Self {
        GenConfig {
            beam_width: 4,
            min_len: 0,
            max_len,
            ..Self::summarization()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::invalid("beam_width must be at least 1"));
        }
        if self.min_len > self.max_len {
            return Err(Error::invalid(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(Error::invalid(
                "length_penalty must be finite and non-negative",
            ));
        }
        if self.banned_ids.contains(&self.eos_id) {
            return Err(Error::invalid("EOS cannot be banned"));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: GenConfig = toml::from_str(&text).map_err(|e| Error::Toml {
            path: path.to_owned(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `logprob / len^α`, `len` counting EOS.
    pub fn score(&self, logprob: f64, len: usize) -> f64 {
        logprob / (len as f64).powf(self.length_penalty)
    }
}

/// Next-token logits for a decoder prefix that starts with BOS.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// A trained model conditioned on one encoded source.
pub struct HatScorer<'a, T: Scalar> {
    pub params: &'a HatParameters<T>,
    pub encoder: &'a EncoderOutput<T>,
}

impl<T: Scalar> StepScorer for HatScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_size
    }

    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(decode_step(self.params, self.encoder, prefix)?.last_logits())
    }
}

impl<T: Scalar> HatScorer<'_, T> {
    /// Re-decodes a finished sequence and collects the hierarchical
    /// attention each generated token saw.
    pub fn trace(&self, bos_id: u32, tokens: &[u32]) -> Result<AttentionTrace> {
        let mut prefix = vec![bos_id];
        prefix.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
        let step = decode_step(self.params, self.encoder, &prefix)?;
        if step.hier_attention.is_empty() {
            return Err(Error::invalid(
                "attention tracing needs a hierarchical model",
            ));
        }
        let weights = step
            .hier_attention
            .iter()
            .map(|t| {
                let (heads, steps, bos) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let d = t.data();
                (0..heads)
                    .map(|h| {
                        (0..steps)
                            .map(|s| {
                                let at = (h * steps + s) * bos;
                                d[at..at + bos].iter().map(|v| v.to_f64_lossy()).collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(AttentionTrace {
            tokens: tokens.to_vec(),
            weights,
        })
    }
}

/// A generated sequence (BOS excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<AttentionTrace>,
}

impl BeamHypothesis {
    /// Tokens before EOS.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(_) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Log-probabilities of the next token after applying the bans and the
/// length constraints to the logits.
pub fn step_log_probs(logits: &[f64], content_len: usize, cfg: &GenConfig) -> Result<Vec<f64>> {
    let v = logits.len();
    let eos = cfg.eos_id as usize;
    if eos >= v {
        return Err(Error::invalid(format!(
            "EOS id {eos} outside vocabulary of {v}"
        )));
    }
    let mut allowed = vec![true; v];
    for &b in &cfg.banned_ids {
        if let Some(a) = allowed.get_mut(b as usize) {
            *a = false;
        }
    }
    if content_len < cfg.min_len {
        allowed[eos] = false;
    }
    if content_len >= cfg.max_len {
        allowed.fill(false);
        allowed[eos] = true;
    }
    let max = logits
        .iter()
        .zip(&allowed)
        .filter(|(_, &a)| a)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("every token is masked"));
    }
    if !max.is_finite() {
        return Err(Error::NonFinite("decoder logits".into()));
    }
    let z: f64 = logits
        .iter()
        .zip(&allowed)
        .filter(|(_, &a)| a)
        .map(|(&x, _)| (x - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    Ok(logits
        .iter()
        .zip(&allowed)
        .map(|(&x, &a)| if a { x - z } else { f64::NEG_INFINITY })
        .collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate() {
        if x > values[best] {
            best = i;
        }
    }
    best
}

/// Picks the most likely next token at every step.
pub fn greedy_decode(scorer: &dyn StepScorer, cfg: &GenConfig) -> Result<BeamHypothesis> {
    cfg.validate()?;
    let mut prefix = vec![cfg.bos_id];
    let mut logprob = 0.0;
    loop {
        let content = prefix.len() - 1;
        let lp = step_log_probs(&scorer.next_logits(&prefix)?, content, cfg)?;
        let next = argmax(&lp);
        logprob += lp[next];
        prefix.push(next as u32);
        if next as u32 == cfg.eos_id {
            return Ok(BeamHypothesis {
                tokens: prefix[1..].to_vec(),
                logprob,
                finished: true,
                trace: None,
            });
        }
    }
}

struct Live {
    tokens: Vec<u32>,
    logprob: f64,
}

/// Beam search over `scorer`; returns the best finished hypothesis.
pub fn beam_search(scorer: &dyn StepScorer, cfg: &GenConfig) -> Result<BeamHypothesis> {
    Ok(beam_search_all(scorer, cfg)?.remove(0))
}

/// All finished hypotheses, best first (ties keep finishing order).
pub fn beam_search_all(scorer: &dyn StepScorer, cfg: &GenConfig) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let k = cfg.beam_width;
    let eos = cfg.eos_id;
    let mut live = vec![Live {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut finished: Vec<(f64, BeamHypothesis)> = Vec::new();
    let finish = |finished: &mut Vec<(f64, BeamHypothesis)>, tokens: Vec<u32>, logprob: f64| {
        let score = cfg.score(logprob, tokens.len());
        finished.push((
            score,
            BeamHypothesis {
                tokens,
                logprob,
                finished: true,
                trace: None,
            },
        ));
    };

    while !live.is_empty() {
        // (logprob, beam index, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(cfg.bos_id);
            prefix.extend_from_slice(&hyp.tokens);
            let lp = step_log_probs(&scorer.next_logits(&prefix)?, hyp.tokens.len(), cfg)?;
            candidates.extend(
                lp.iter()
                    .enumerate()
                    .filter(|(_, x)| x.is_finite())
                    .map(|(t, &x)| (hyp.logprob + x, b, t as u32)),
            );
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        for &(lp, b, t) in candidates.iter().take(k) {
            if t == eos {
                let mut tokens = live[b].tokens.clone();
                tokens.push(eos);
                finish(&mut finished, tokens, lp);
            }
        }
        let mut next = Vec::with_capacity(k);
        for &(lp, b, t) in candidates.iter().filter(|c| c.2 != eos).take(k) {
            let mut tokens = live[b].tokens.clone();
            tokens.push(t);
            next.push(Live {
                tokens,
                logprob: lp,
            });
        }
        live = next;

        if let Some(best) = finished.iter().map(|f| f.0).max_by(f64::total_cmp) {
            let bound = |h: &Live| {
                let shortest = h.tokens.len().max(cfg.min_len) + 1;
                cfg.score(h.logprob, shortest)
                    .max(cfg.score(h.logprob, cfg.max_len + 1))
            };
            if live.iter().all(|h| bound(h) <= best) {
                break;
            }
        }
    }
    if finished.is_empty() {
        return Err(Error::invalid("beam search finished no hypothesis"));
    }
    finished.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(finished.into_iter().map(|(_, h)| h).collect())
}

/// Beam search on a HAT model, re-decoding the winner to attach its
/// attention trace when requested.
pub fn generate<T: Scalar>(
    params: &HatParameters<T>,
    encoder: &EncoderOutput<T>,
    cfg: &GenConfig,
) -> Result<BeamHypothesis> {
    let scorer = HatScorer { params, encoder };
    let mut best = beam_search(&scorer, cfg)?;
    if cfg.trace_attention {
        best.trace = Some(scorer.trace(cfg.bos_id, &best.tokens)?);
    }
    Ok(best)
}
