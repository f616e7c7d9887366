use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::tokenize;
use crate::error::{Error, Result};

/// A source segment and its aligned target segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedSegment {
    pub src: String,
    pub tgt: String,
}

impl AlignedSegment {
    /// Source tokens this segment occupies once encoded, including its BOS.
    pub fn source_cost(&self) -> usize {
        tokenize(&self.src).count() + 1
    }
}

/// Greedy packing of consecutive items under a total-length budget.
///
/// A chunk grows while its total stays within `max_tokens`. Errors if any
/// single item exceeds the budget.
pub fn pack_segments(lengths: &[usize], max_tokens: usize) -> Result<Vec<Range<usize>>> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut used = 0;
    for (i, &len) in lengths.iter().enumerate() {
        if len > max_tokens {
            return Err(Error::invalid(format!(
                "segment {i} has {len} tokens, more than the chunk limit {max_tokens}"
            )));
        }
        if used + len > max_tokens {
            chunks.push(start..i);
            start = i;
            used = 0;
        }
        used += len;
    }
    if start < lengths.len() {
        chunks.push(start..lengths.len());
    }
    Ok(chunks)
}

/// Splits an aligned document into chunks that break only between segments.
pub fn chunk_document(segments: &[AlignedSegment], max_tokens: usize) -> Result<Vec<Range<usize>>> {
    let lengths: Vec<usize> = segments.iter().map(AlignedSegment::source_cost).collect();
    pack_segments(&lengths, max_tokens)
}
