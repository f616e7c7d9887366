//! Hierarchical attention transformer and its plain baseline.

mod checkpoint;
mod config;
mod count;
mod forward;
mod layers;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{HatConfig, ModelMode, TRANSLATION_VOCAB};
pub use count::{
    attention_params, count_parameters, decoder_layer_params, encoder_layer_params, ffn_params,
    hier_sublayer_params, hierarchical_delta, norm_params, parameter_breakdown, ParamBreakdown,
};
pub use forward::{
    decode, decode_step, encode, encode_output, encoder_only_forward, forward_batch,
    hierarchical_encode, mlm_logits, DecoderOutput, EncoderOnlyOutput, EncoderOutput,
    EncoderStates, StepOutput,
};
pub use params::{layout_shapes, HatParameters, Layout, INIT_STD};
