//! Optimization: AdamW, label-smoothed cross-entropy, warmup plus linear
//! decay, gradient accumulation and validation-based model selection.

mod config;
mod loss;
mod mlm;
mod optim;
#[cfg(test)]
mod tests;
mod trainer;

pub use config::{OptimizerConfig, Selection};
pub use loss::{argmax, label_smoothed_ce, token_accuracy};
pub use mlm::{mask_tokens, mlm_pretrain, MaskedExample, MaskedLm, MASK_PROB};
pub use optim::{adam_step, lr_at, RngState, TrainState};
pub use trainer::{
    evaluate_loss, read_log, train, train_objective, LogRecord, Objective, Scorer, Seq2Seq,
    TrainOptions, TrainOutcome,
};
