use super::params::{AttentionIds, EncoderLayerIds, FfnIds, NormIds};
use crate::error::Result;
use crate::tensor::{ParamId, Scalar, Session, Var};

/// Which keys each query may attend to, flattened `[batch, queries, keys]`.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub keep: Vec<bool>,
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
}

impl AttnMask {
    /// Every query sees every kept key of its own example.
    pub fn keys(key_keep: &[bool], batch: usize, queries: usize, keys: usize) -> Self {
        let mut keep = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            let row = &key_keep[b * keys..(b + 1) * keys];
            for _ in 0..queries {
                keep.extend_from_slice(row);
            }
        }
        AttnMask {
            keep,
            batch,
            queries,
            keys,
        }
    }

    /// Query `t` sees kept keys at positions `<= t`.
    pub fn causal(key_keep: &[bool], batch: usize, len: usize) -> Self {
        let mut keep = Vec::with_capacity(batch * len * len);
        for b in 0..batch {
            for q in 0..len {
                keep.extend((0..len).map(|k| k <= q && key_keep[b * len + k]));
            }
        }
        AttnMask {
            keep,
            batch,
            queries: len,
            keys: len,
        }
    }

    fn per_head(&self, heads: usize) -> Vec<bool> {
        let block = self.queries * self.keys;
        let mut out = Vec::with_capacity(self.keep.len() * heads);
        for b in 0..self.batch {
            let slab = &self.keep[b * block..(b + 1) * block];
            for _ in 0..heads {
                out.extend_from_slice(slab);
            }
        }
        out
    }
}

pub(crate) fn linear<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let (w, b) = (s.param(w), s.param(b));
    let y = s.graph.matmul(x, w)?;
    s.graph.add_bias(y, b)
}

pub(crate) fn norm<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    ids: &NormIds,
    eps: f64,
) -> Result<Var> {
    let (g, b) = (s.param(ids.gain), s.param(ids.bias));
    s.graph.layer_norm(x, g, b, eps)
}

pub(crate) fn feed_forward<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    ids: &FfnIds,
    dropout: f64,
) -> Result<Var> {
    let h = linear(s, x, ids.w1, ids.b1)?;
    let h = s.graph.gelu(h);
    let h = s.graph.dropout(h, dropout)?;
    linear(s, h, ids.w2, ids.b2)
}

/// Multi-head scaled dot-product attention of `query` `[B, Lq, d]` over
/// `memory` `[B, Lk, d]`. Returns the projected output and the attention
/// probabilities `[B, heads, Lq, Lk]` (before dropout).
pub(crate) fn attention<T: Scalar>(
    s: &mut Session<'_, T>,
    ids: &AttentionIds,
    query: Var,
    memory: Var,
    mask: &AttnMask,
    heads: usize,
    dropout: f64,
) -> Result<(Var, Var)> {
    let (b, lq, lk) = (mask.batch, mask.queries, mask.keys);
    let d = *s.graph.shape(query).last().expect("query is 3-d");
    let dh = d / heads;

    let q = linear(s, query, ids.q_w, ids.q_b)?;
    let q = s.graph.reshape(q, &[b, lq, heads, dh])?;
    let q = s.graph.permute(q, &[0, 2, 1, 3])?;
    let k = linear(s, memory, ids.k_w, ids.k_b)?;
    let k = s.graph.reshape(k, &[b, lk, heads, dh])?;
    let k = s.graph.permute(k, &[0, 2, 3, 1])?;
    let v = linear(s, memory, ids.v_w, ids.v_b)?;
    let v = s.graph.reshape(v, &[b, lk, heads, dh])?;
    let v = s.graph.permute(v, &[0, 2, 1, 3])?;

    let scores = s.graph.matmul(q, k)?;
    let scores = s.graph.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
    let probs = s.graph.masked_softmax(scores, &mask.per_head(heads), 3)?;
    let dropped = s.graph.dropout(probs, dropout)?;
    let ctx = s.graph.matmul(dropped, v)?;
    let ctx = s.graph.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = s.graph.reshape(ctx, &[b, lq, d])?;
    let out = linear(s, ctx, ids.o_w, ids.o_b)?;
    Ok((out, probs))
}

/// `LayerNorm(x + Dropout(sublayer))`.
pub(crate) fn residual_norm<T: Scalar>(
    s: &mut Session<'_, T>,
    x: Var,
    sub: Var,
    ids: &NormIds,
    dropout: f64,
    eps: f64,
) -> Result<Var> {
    let sub = s.graph.dropout(sub, dropout)?;
    let sum = s.graph.add(x, sub)?;
    norm(s, sum, ids, eps)
}

/// Post-norm transformer encoder layer (self-attention, then feed-forward).
pub(crate) fn encoder_layer<T: Scalar>(
    s: &mut Session<'_, T>,
    ids: &EncoderLayerIds,
    x: Var,
    mask: &AttnMask,
    heads: usize,
    dropout: f64,
    eps: f64,
) -> Result<Var> {
    let (a, _) = attention(s, &ids.self_attn, x, x, mask, heads, dropout)?;
    let x = residual_norm(s, x, a, &ids.self_norm, dropout, eps)?;
    let h = feed_forward(s, x, &ids.ffn, dropout)?;
    residual_norm(s, x, h, &ids.ffn_norm, dropout, eps)
}
