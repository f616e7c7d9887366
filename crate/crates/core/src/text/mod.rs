//! Raw text to model-ready id sequences with sentence/turn BOS markers.

mod batch;
mod chunk;
pub mod dataset;
mod encode;
mod segment;
mod vocab;

pub use batch::{collate, Batch};
pub use chunk::{chunk_document, pack_segments, AlignedSegment};
pub use encode::{
    encode_conversation, encode_document, encode_target, EncodedExample, SourceEncoding,
};
pub use segment::segment_sentences;
pub use vocab::{
    tokenize, Vocabulary, BOS_ID, EOS_ID, MASK_TOKEN, NUM_RESERVED, PAD_ID, RESERVED_TOKENS, UNK_ID,
};
