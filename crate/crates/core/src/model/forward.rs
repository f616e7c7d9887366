//! Forward passes: encoder, hierarchical encoder, decoder and the
//! encoder-only variant.

use super::config::ModelMode;
use super::layers::{attention, encoder_layer, feed_forward, norm, residual_norm, AttnMask};
use super::params::{HatParameters, HierSublayerIds};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Session, Tensor, Var};
use crate::text::Batch;

/// Encoder results bound to a session's graph.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    /// `[batch, src_len, d]`
    pub tokens: Var,
    /// `[batch, num_bos, d]`, absent in plain mode.
    pub hier: Option<Var>,
    pub batch: usize,
    pub src_len: usize,
    pub num_bos: usize,
    pub source_keep: Vec<bool>,
    /// `[batch, num_bos]`: real BOS slots (rows beyond an example's BOS
    /// count are padding).
    pub bos_keep: Vec<bool>,
}

/// Detached encoder results, reusable across decoding sessions.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    pub token_states: Tensor<T>,
    pub hier_states: Option<Tensor<T>>,
    pub batch: usize,
    pub src_len: usize,
    pub num_bos: usize,
    pub source_keep: Vec<bool>,
    pub bos_keep: Vec<bool>,
}

impl EncoderStates {
    pub fn detach<T: Scalar>(&self, g: &Graph<T>) -> EncoderOutput<T> {
        EncoderOutput {
            token_states: g.value(self.tokens).clone(),
            hier_states: self.hier.map(|h| g.value(h).clone()),
            batch: self.batch,
            src_len: self.src_len,
            num_bos: self.num_bos,
            source_keep: self.source_keep.clone(),
            bos_keep: self.bos_keep.clone(),
        }
    }
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn attach(&self, s: &mut Session<'_, T>) -> EncoderStates {
        EncoderStates {
            tokens: s.graph.constant(self.token_states.clone()),
            hier: self
                .hier_states
                .as_ref()
                .map(|h| s.graph.constant(h.clone())),
            batch: self.batch,
            src_len: self.src_len,
            num_bos: self.num_bos,
            source_keep: self.source_keep.clone(),
            bos_keep: self.bos_keep.clone(),
        }
    }

    /// BOS count of the `i`-th example.
    pub fn bos_count(&self, i: usize) -> usize {
        self.bos_keep[i * self.num_bos..(i + 1) * self.num_bos]
            .iter()
            .filter(|&&k| k)
            .count()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[batch, tgt_len, vocab]`
    pub logits: Var,
    /// Per decoder layer, `[batch, heads, tgt_len, num_bos]`.
    pub hier_attention: Vec<Var>,
}

/// Token + position (+ segment) embeddings, `[batch, len, d]`.
fn embed<T: Scalar>(
    s: &mut Session<'_, T>,
    params: &HatParameters<T>,
    ids: &[u32],
    segments: Option<&[u32]>,
    batch: usize,
    len: usize,
) -> Result<Var> {
    let cfg = &params.config;
    if len > cfg.max_positions {
        return Err(Error::invalid(format!(
            "sequence length {len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let to_index = |v: &[u32], limit: usize, what: &str| -> Result<Vec<usize>> {
        v.iter()
            .map(|&i| {
                let i = i as usize;
                if i < limit {
                    Ok(i)
                } else {
                    Err(Error::invalid(format!(
                        "{what} id {i} out of range (< {limit})"
                    )))
                }
            })
            .collect()
    };
    let lay = &params.layout;
    let table = s.param(lay.tokens);
    let tok = s
        .graph
        .gather(table, &to_index(ids, cfg.vocab_size, "token")?)?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
    let table = s.param(lay.positions);
    let pos = s.graph.gather(table, &positions)?;
    let mut x = s.graph.add(tok, pos)?;
    if let Some(seg) = segments {
        let table = s.param(lay.segments);
        let seg = s
            .graph
            .gather(table, &to_index(seg, cfg.num_segments, "segment")?)?;
        x = s.graph.add(x, seg)?;
    }
    let x = s.graph.reshape(x, &[batch, len, cfg.hidden_size])?;
    s.graph.dropout(x, cfg.dropout)
}

/// Flat row indices of each example's BOS tokens, padded per example with
/// its first BOS so padding rows stay functions of BOS rows only.
fn bos_rows(
    bos_positions: &[Vec<usize>],
    src_len: usize,
) -> Result<(Vec<usize>, Vec<bool>, usize)> {
    let num_bos = bos_positions.iter().map(Vec::len).max().unwrap_or(0);
    if num_bos == 0 || bos_positions.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every example needs at least one BOS token"));
    }
    let mut rows = Vec::with_capacity(bos_positions.len() * num_bos);
    let mut keep = Vec::with_capacity(bos_positions.len() * num_bos);
    for (b, pos) in bos_positions.iter().enumerate() {
        for j in 0..num_bos {
            let p = pos.get(j).copied().unwrap_or(pos[0]);
            rows.push(b * src_len + p);
            keep.push(j < pos.len());
        }
    }
    Ok((rows, keep, num_bos))
}

/// Runs the hierarchical encoder stack over the BOS rows of `token_states`.
///
/// Queries, keys and values all come from BOS rows, so the result depends
/// on no other row.
pub fn hierarchical_encode<T: Scalar>(
    s: &mut Session<'_, T>,
    params: &HatParameters<T>,
    token_states: Var,
    bos_positions: &[Vec<usize>],
) -> Result<(Var, Vec<bool>)> {
    let cfg = &params.config;
    let shape = s.graph.shape(token_states).to_vec();
    let (batch, src_len, d) = (shape[0], shape[1], shape[2]);
    let (rows, keep, num_bos) = bos_rows(bos_positions, src_len)?;
    let flat = s.graph.reshape(token_states, &[batch * src_len, d])?;
    let gathered = s.graph.gather(flat, &rows)?;
    let mut h = s.graph.reshape(gathered, &[batch, num_bos, d])?;
    let mask = AttnMask::keys(&keep, batch, num_bos, num_bos);
    for ids in &params.layout.hier_encoder {
        h = encoder_layer(
            s,
            ids,
            h,
            &mask,
            cfg.num_heads,
            cfg.dropout,
            cfg.layer_norm_eps,
        )?;
    }
    Ok((h, keep))
}

/// Token-level encoder plus, in hat mode, the hierarchical encoder.
pub fn encode<T: Scalar>(
    s: &mut Session<'_, T>,
    params: &HatParameters<T>,
    batch: &Batch,
) -> Result<EncoderStates> {
    let cfg = &params.config;
    if cfg.mode.is_encoder_only() {
        return Err(Error::invalid("encode needs an encoder-decoder model"));
    }
    let (b, l) = (batch.batch_size, batch.src_len);
    let mut x = embed(s, params, &batch.source, Some(&batch.segments), b, l)?;
    let mask = AttnMask::keys(&batch.source_mask, b, l, l);
    for ids in &params.layout.encoder {
        x = encoder_layer(
            s,
            ids,
            x,
            &mask,
            cfg.num_heads,
            cfg.dropout,
            cfg.layer_norm_eps,
        )?;
    }
    let (hier, bos_keep, num_bos) = if cfg.mode == ModelMode::Hat {
        let (h, keep) = hierarchical_encode(s, params, x, &batch.bos_positions)?;
        let nb = keep.len() / b;
        (Some(h), keep, nb)
    } else {
        (None, Vec::new(), 0)
    };
    Ok(EncoderStates {
        tokens: x,
        hier,
        batch: b,
        src_len: l,
        num_bos,
        source_keep: batch.source_mask.clone(),
        bos_keep,
    })
}

/// Pre-normalized residual attention: `x + Dropout(Attn(LN(x), memory))`.
///
/// With a zero output projection this is exactly the identity, so the
/// hierarchical path can be switched off without touching other weights.
fn hier_sublayer<T: Scalar>(
    s: &mut Session<'_, T>,
    params: &HatParameters<T>,
    ids: &HierSublayerIds,
    x: Var,
    memory: Option<Var>,
    key_keep: &[bool],
    num_keys: usize,
) -> Result<(Var, Var)> {
    let cfg = &params.config;
    let shape = s.graph.shape(x).to_vec();
    let (b, lq) = (shape[0], shape[1]);
    let q = norm(s, x, &ids.norm, cfg.layer_norm_eps)?;
    let memory = memory.unwrap_or(q);
    let mask = AttnMask::keys(key_keep, b, lq, num_keys);
    let (a, probs) = attention(s, &ids.attn, q, memory, &mask, cfg.num_heads, cfg.dropout)?;
    let a = s.graph.dropout(a, cfg.dropout)?;
    Ok((s.graph.add(x, a)?, probs))
}

/// Decoder over `target_input` (`[batch, tgt_len]`, starting with BOS).
///
/// Each layer: causal self-attention, token-level cross-attention, then (hat
/// mode) hierarchical cross-attention over the BOS states, then the
/// feed-forward block.
pub fn decode<T: Scalar>(
    s: &mut Session<'_, T>,
    params: &HatParameters<T>,
    enc: &EncoderStates,
    target_input: &[u32],
    target_keep: &[bool],
    tgt_len: usize,
) -> Result<DecoderOutput> {
    let cfg = &params.config;
    let b = enc.batch;
    if tgt_len == 0 || target_input.len() != b * tgt_len || target_keep.len() != b * tgt_len {
        return Err(Error::invalid(
            "decoder input must be a non-empty [batch, tgt_len] matrix",
        ));
    }
    let (eps, p, heads) = (cfg.layer_norm_eps, cfg.dropout, cfg.num_heads);
    let mut x = embed(s, params, target_input, None, b, tgt_len)?;
    let self_mask = AttnMask::causal(target_keep, b, tgt_len);
    let cross_mask = AttnMask::keys(&enc.source_keep, b, tgt_len, enc.src_len);
    let mut hier_attention = Vec::new();
    for ids in &params.layout.decoder {
        let (a, _) = attention(s, &ids.self_attn, x, x, &self_mask, heads, p)?;
        x = residual_norm(s, x, a, &ids.self_norm, p, eps)?;
        let (a, _) = attention(s, &ids.cross_attn, x, enc.tokens, &cross_mask, heads, p)?;
        x = residual_norm(s, x, a, &ids.cross_norm, p, eps)?;
        if let (Some(h), Some(hier)) = (&ids.hier, enc.hier) {
            let (y, probs) =
                hier_sublayer(s, params, h, x, Some(hier), &enc.bos_keep, enc.num_bos)?;
            x = y;
            hier_attention.push(probs);
        }
        let f = feed_forward(s, x, &ids.ffn, p)?;
        x = residual_norm(s, x, f, &ids.ffn_norm, p, eps)?;
    }
    let logits = tied_logits(s, params, x)?;
    Ok(DecoderOutput {
        logits,
        hier_attention,
    })
}

/// Projection onto the vocabulary through the token embedding.
fn tied_logits<T: Scalar>(
    s: &mut Session<'_, T>,
    params: &HatParameters<T>,
    x: Var,
) -> Result<Var> {
    let table = s.param(params.layout.tokens);
    let t = s.graph.transpose(table)?;
    s.graph.matmul(x, t)
}

/// Teacher-forced encode + decode of a whole batch.
pub fn forward_batch<T: Scalar>(
    s: &mut Session<'_, T>,
    params: &HatParameters<T>,
    batch: &Batch,
) -> Result<DecoderOutput> {
    let enc = encode(s, params, batch)?;
    decode(
        s,
        params,
        &enc,
        &batch.target_input,
        &batch.target_mask,
        batch.tgt_len,
    )
}

/// Inference-mode encoder run, detached for decoding.
pub fn encode_output<T: Scalar>(
    params: &HatParameters<T>,
    batch: &Batch,
) -> Result<EncoderOutput<T>> {
    let mut s = Session::inference(&params.store);
    let enc = encode(&mut s, params, batch)?;
    Ok(enc.detach(&s.graph))
}

/// Result of decoding one prefix.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// `[prefix_len, vocab]`
    pub logits: Tensor<T>,
    /// Per layer, `[heads, prefix_len, num_bos]`.
    pub hier_attention: Vec<Tensor<T>>,
}

impl<T: Scalar> StepOutput<T> {
    pub fn last_logits(&self) -> Vec<f64> {
        let rows = self.logits.shape()[0];
        self.logits
            .row(rows - 1)
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect()
    }
}

/// Decoder logits for one prefix (which must start with BOS) against a
/// single-example encoder output.
pub fn decode_step<T: Scalar>(
    params: &HatParameters<T>,
    enc: &EncoderOutput<T>,
    prefix: &[u32],
) -> Result<StepOutput<T>> {
    if enc.batch != 1 {
        return Err(Error::invalid(
            "decode_step takes a single-example encoder output",
        ));
    }
    if prefix.is_empty() {
        return Err(Error::invalid("decoder prefix must start with BOS"));
    }
    let mut s = Session::inference(&params.store);
    let states = enc.attach(&mut s);
    let keep = vec![true; prefix.len()];
    let out = decode(&mut s, params, &states, prefix, &keep, prefix.len())?;
    let logits = s.graph.value(out.logits);
    let v = params.config.vocab_size;
    Ok(StepOutput {
        logits: Tensor::new(vec![prefix.len(), v], logits.data().to_vec())?,
        hier_attention: out
            .hier_attention
            .iter()
            .map(|&a| {
                let t = s.graph.value(a);
                Tensor::new(t.shape()[1..].to_vec(), t.data().to_vec())
            })
            .collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug)]
pub struct EncoderOnlyOutput {
    /// `[batch, src_len, d]`
    pub states: Var,
    /// First-token state per example, `[batch, d]`.
    pub pooled: Var,
}

/// Encoder-only stack; in the hierarchical variant every layer inserts an
/// attention sublayer over the current BOS rows between self-attention and
/// the feed-forward block.
pub fn encoder_only_forward<T: Scalar>(
    s: &mut Session<'_, T>,
    params: &HatParameters<T>,
    batch: &Batch,
) -> Result<EncoderOnlyOutput> {
    let cfg = &params.config;
    if !cfg.mode.is_encoder_only() {
        return Err(Error::invalid(format!(
            "encoder_only_forward needs an encoder-only mode, got {:?}",
            cfg.mode
        )));
    }
    let (b, l, d) = (batch.batch_size, batch.src_len, cfg.hidden_size);
    let (eps, p, heads) = (cfg.layer_norm_eps, cfg.dropout, cfg.num_heads);
    let mut x = embed(s, params, &batch.source, Some(&batch.segments), b, l)?;
    let mask = AttnMask::keys(&batch.source_mask, b, l, l);
    let bos = if cfg.mode == ModelMode::EncoderOnlyHat {
        Some(bos_rows(&batch.bos_positions, l)?)
    } else {
        None
    };
    for ids in &params.layout.encoder {
        let (a, _) = attention(s, &ids.self_attn, x, x, &mask, heads, p)?;
        x = residual_norm(s, x, a, &ids.self_norm, p, eps)?;
        if let (Some(h), Some((rows, keep, nb))) = (&ids.hier, &bos) {
            let q = norm(s, x, &h.norm, eps)?;
            let flat = s.graph.reshape(q, &[b * l, d])?;
            let kv = s.graph.gather(flat, rows)?;
            let kv = s.graph.reshape(kv, &[b, *nb, d])?;
            let hmask = AttnMask::keys(keep, b, l, *nb);
            let (a, _) = attention(s, &h.attn, q, kv, &hmask, heads, p)?;
            let a = s.graph.dropout(a, p)?;
            x = s.graph.add(x, a)?;
        }
        let f = feed_forward(s, x, &ids.ffn, p)?;
        x = residual_norm(s, x, f, &ids.ffn_norm, p, eps)?;
    }
    let flat = s.graph.reshape(x, &[b * l, d])?;
    let firsts: Vec<usize> = (0..b).map(|i| i * l).collect();
    let pooled = s.graph.gather(flat, &firsts)?;
    Ok(EncoderOnlyOutput { states: x, pooled })
}

/// Vocabulary logits `[positions.len(), vocab]` at flat `batch·src_len`
/// row indices of `states`.
pub fn mlm_logits<T: Scalar>(
    s: &mut Session<'_, T>,
    params: &HatParameters<T>,
    states: Var,
    positions: &[usize],
) -> Result<Var> {
    let shape = s.graph.shape(states).to_vec();
    let flat = s.graph.reshape(states, &[shape[0] * shape[1], shape[2]])?;
    let rows = s.graph.gather(flat, positions)?;
    tied_logits(s, params, rows)
}
