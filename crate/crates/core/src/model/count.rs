//! Closed-form parameter counts.
//!
//! Per component, with hidden size `d`, feed-forward size `f`:
//!
//! | component                    | scalars                |
//! |------------------------------|------------------------|
//! | attention (Q, K, V, O + bias)| `4d² + 4d`             |
//! | layer norm (gain, bias)      | `2d`                   |
//! | feed-forward                 | `2df + f + d`          |
//! | encoder layer                | `attn + ffn + 2·norm`  |
//! | decoder layer                | `2·attn + ffn + 3·norm`|
//! | hierarchical sublayer        | `attn + norm`          |
//!
//! Embeddings are `(vocab + positions + segments)·d`; the output projection
//! is tied to the token embedding and adds nothing.

use serde::{Deserialize, Serialize};

use super::config::{HatConfig, ModelMode};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embeddings: u64,
    pub encoder: u64,
    pub hierarchical_encoder: u64,
    pub decoder: u64,
    /// Hierarchical sublayers inside decoder (or encoder-only) layers.
    pub hierarchical_attention: u64,
    pub total: u64,
}

pub fn attention_params(d: u64) -> u64 {
    4 * d * d + 4 * d
}

pub fn norm_params(d: u64) -> u64 {
    2 * d
}

pub fn ffn_params(d: u64, f: u64) -> u64 {
    2 * d * f + f + d
}

pub fn encoder_layer_params(d: u64, f: u64) -> u64 {
    attention_params(d) + ffn_params(d, f) + 2 * norm_params(d)
}

pub fn decoder_layer_params(d: u64, f: u64) -> u64 {
    2 * attention_params(d) + ffn_params(d, f) + 3 * norm_params(d)
}

pub fn hier_sublayer_params(d: u64) -> u64 {
    attention_params(d) + norm_params(d)
}

pub fn parameter_breakdown(cfg: &HatConfig) -> ParamBreakdown {
    let d = cfg.hidden_size as u64;
    let f = cfg.ffn_size as u64;
    let layers = cfg.num_layers as u64;
    let embeddings = (cfg.vocab_size + cfg.max_positions + cfg.num_segments) as u64 * d;
    let encoder = layers * encoder_layer_params(d, f);
    let (hierarchical_encoder, decoder, hierarchical_attention) = match cfg.mode {
        ModelMode::Hat => (
            cfg.num_hier_layers as u64 * encoder_layer_params(d, f),
            layers * decoder_layer_params(d, f),
            layers * hier_sublayer_params(d),
        ),
        ModelMode::Plain => (0, layers * decoder_layer_params(d, f), 0),
        ModelMode::EncoderOnlyHat => (0, 0, layers * hier_sublayer_params(d)),
        ModelMode::EncoderOnlyPlain => (0, 0, 0),
    };
    ParamBreakdown {
        embeddings,
        encoder,
        hierarchical_encoder,
        decoder,
        hierarchical_attention,
        total: embeddings + encoder + hierarchical_encoder + decoder + hierarchical_attention,
    }
}

/// Exact number of learnable scalars.
pub fn count_parameters(cfg: &HatConfig) -> u64 {
    parameter_breakdown(cfg).total
}

/// Scalars the hierarchical components add over the plain architecture:
/// `num_hier_layers` encoder layers plus one hierarchical sublayer per layer.
pub fn hierarchical_delta(cfg: &HatConfig) -> u64 {
    let d = cfg.hidden_size as u64;
    let f = cfg.ffn_size as u64;
    let layers = cfg.num_layers as u64;
    match cfg.mode {
        ModelMode::Hat => {
            cfg.num_hier_layers as u64 * encoder_layer_params(d, f)
                + layers * hier_sublayer_params(d)
        }
        ModelMode::EncoderOnlyHat => layers * hier_sublayer_params(d),
        ModelMode::Plain | ModelMode::EncoderOnlyPlain => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::layout_shapes;
    use proptest::prelude::*;

    fn layout_count(cfg: &HatConfig) -> u64 {
        layout_shapes(cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }

    #[test]
    fn large_deltas_from_closed_form() {
        // 12 decoder layers · (4d² + 6d) + one encoder layer at d=1024, f=4096
        let cfg = HatConfig::summarization_large(ModelMode::Hat);
        assert_eq!(hierarchical_delta(&cfg), 12 * 4_200_448 + 12_596_224);
        assert_eq!(hierarchical_delta(&cfg), 63_001_600);
        let cfg = HatConfig::translation_large(ModelMode::Hat);
        assert_eq!(hierarchical_delta(&cfg), 37_798_912);
        let cfg = HatConfig::translation_small(ModelMode::Hat);
        assert_eq!(hierarchical_delta(&cfg), 8_412_672);
    }

    #[test]
    fn delta_is_difference_of_totals() {
        for cfg in [
            HatConfig::summarization_large(ModelMode::Hat),
            HatConfig::translation_small(ModelMode::Hat),
            HatConfig::tiny(ModelMode::EncoderOnlyHat, 30),
        ] {
            let plain = cfg.as_plain();
            assert_eq!(
                count_parameters(&cfg) - count_parameters(&plain),
                hierarchical_delta(&cfg)
            );
        }
    }

    proptest! {
        #[test]
        fn closed_form_matches_layout(
            layers in 1usize..4, heads in 1usize..4, dh in 1usize..5, f in 1usize..20,
            hier in 0usize..3, vocab in 5usize..40, mode in 0usize..4,
        ) {
            let mode = [ModelMode::Hat, ModelMode::Plain, ModelMode::EncoderOnlyHat, ModelMode::EncoderOnlyPlain][mode];
            let cfg = HatConfig {
                mode,
                num_layers: layers,
                hidden_size: heads * dh,
                ffn_size: f,
                num_heads: heads,
                num_hier_layers: hier,
                vocab_size: vocab,
                max_positions: 16,
                num_segments: 3,
                dropout: 0.0,
                layer_norm_eps: 1e-5,
            }.normalized();
            prop_assert_eq!(count_parameters(&cfg), layout_count(&cfg));
        }
    }
}
