use super::encode::EncodedExample;
use super::vocab::BOS_ID;
use crate::error::{Error, Result};

/// Padded, row-major view of several examples.
///
/// All matrices are flattened `[batch_size, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub source: Vec<u32>,
    pub segments: Vec<u32>,
    pub source_mask: Vec<bool>,
    pub bos_mask: Vec<bool>,
    pub bos_positions: Vec<Vec<usize>>,
    /// Decoder input: BOS followed by the target shifted right.
    pub target_input: Vec<u32>,
    /// Gold next tokens, PAD past each target's end.
    pub target_output: Vec<u32>,
    pub target_mask: Vec<bool>,
}

impl Batch {
    pub fn max_bos(&self) -> usize {
        self.bos_positions.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn num_target_tokens(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }

    pub fn single(example: &EncodedExample, pad_id: u32) -> Result<Self> {
        collate(std::slice::from_ref(example), pad_id)
    }
}

/// Pads examples to the longest source and target in the batch.
pub fn collate(examples: &[EncodedExample], pad_id: u32) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot collate an empty batch"));
    }
    let b = examples.len();
    let src_len = examples
        .iter()
        .map(|e| e.source_ids.len())
        .max()
        .unwrap_or(0);
    if src_len == 0 {
        return Err(Error::invalid("batch has no source tokens"));
    }
    let tgt_len = examples
        .iter()
        .map(|e| e.target_ids.len())
        .max()
        .unwrap_or(0);
    let mut batch = Batch {
        batch_size: b,
        src_len,
        tgt_len,
        source: vec![pad_id; b * src_len],
        segments: vec![0; b * src_len],
        source_mask: vec![false; b * src_len],
        bos_mask: vec![false; b * src_len],
        bos_positions: Vec::with_capacity(b),
        target_input: vec![pad_id; b * tgt_len],
        target_output: vec![pad_id; b * tgt_len],
        target_mask: vec![false; b * tgt_len],
    };
    for (i, ex) in examples.iter().enumerate() {
        ex.validate()?;
        if ex.source_ids.is_empty() {
            return Err(Error::invalid(format!("example {i} has an empty source")));
        }
        let row = i * src_len;
        batch.source[row..row + ex.source_ids.len()].copy_from_slice(&ex.source_ids);
        batch.segments[row..row + ex.segment_ids.len()].copy_from_slice(&ex.segment_ids);
        batch.source_mask[row..row + ex.source_ids.len()].fill(true);
        for &p in &ex.bos_positions {
            batch.bos_mask[row + p] = true;
        }
        batch.bos_positions.push(ex.bos_positions.clone());

        let row = i * tgt_len;
        for (t, &id) in ex.target_ids.iter().enumerate() {
            batch.target_output[row + t] = id;
            batch.target_mask[row + t] = true;
            batch.target_input[row + t] = if t == 0 { BOS_ID } else { ex.target_ids[t - 1] };
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::{EOS_ID, PAD_ID};

    fn ex(src: &[u32], bos: &[usize], tgt: &[u32]) -> EncodedExample {
        EncodedExample {
            source_ids: src.to_vec(),
            bos_positions: bos.to_vec(),
            segment_ids: vec![0; src.len()],
            target_ids: tgt.to_vec(),
        }
    }

    #[test]
    fn pads_and_masks() {
        let a = ex(&[BOS_ID, 5, 6, BOS_ID, 7], &[0, 3], &[8, EOS_ID]);
        let b = ex(&[BOS_ID, 9], &[0], &[EOS_ID]);
        let batch = collate(&[a, b], PAD_ID).unwrap();
        assert_eq!((batch.src_len, batch.tgt_len), (5, 2));
        assert_eq!(&batch.source[5..], &[BOS_ID, 9, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(&batch.source_mask[5..], &[true, true, false, false, false]);
        assert_eq!(&batch.bos_mask[..5], &[true, false, false, true, false]);
        assert_eq!(batch.target_input, [BOS_ID, 8, BOS_ID, PAD_ID]);
        assert_eq!(batch.target_output, [8, EOS_ID, EOS_ID, PAD_ID]);
        assert_eq!(batch.num_target_tokens(), 3);
        // BOS mask is a subset of the source mask
        assert!(batch
            .bos_mask
            .iter()
            .zip(&batch.source_mask)
            .all(|(b, s)| !b || *s));
        // mask is exactly the non-PAD indicator
        assert!(batch
            .source
            .iter()
            .zip(&batch.source_mask)
            .all(|(&id, &m)| m == (id != PAD_ID)));
    }

    #[test]
    fn rejects_malformed_examples() {
        assert!(collate(&[], PAD_ID).is_err());
        let bad = ex(&[5, 6], &[0], &[EOS_ID]);
        assert!(collate(&[bad], PAD_ID).is_err());
    }
}
