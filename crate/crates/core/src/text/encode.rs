use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};

/// A tokenized training or inference example.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub source_ids: Vec<u32>,
    /// Sorted indices into `source_ids` holding BOS ids.
    pub bos_positions: Vec<usize>,
    pub segment_ids: Vec<u32>,
    /// Target tokens terminated by EOS; empty for unlabelled inputs.
    #[serde(default)]
    pub target_ids: Vec<u32>,
}

impl EncodedExample {
    pub fn from_source(source: SourceEncoding, target_ids: Vec<u32>) -> Self {
        EncodedExample {
            source_ids: source.ids,
            bos_positions: source.bos_positions,
            segment_ids: source.segment_ids,
            target_ids,
        }
    }

    /// Checks the structural invariants tying the fields together.
    pub fn validate(&self) -> Result<()> {
        if self.segment_ids.len() != self.source_ids.len() {
            return Err(Error::invalid(
                "segment_ids and source_ids differ in length",
            ));
        }
        if !self.source_ids.is_empty() && self.bos_positions.is_empty() {
            return Err(Error::invalid("non-empty source without BOS positions"));
        }
        if self.bos_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bos_positions not strictly increasing"));
        }
        if self
            .bos_positions
            .iter()
            .any(|&p| self.source_ids.get(p) != Some(&BOS_ID))
        {
            return Err(Error::invalid(
                "bos_positions entry does not address a BOS id",
            ));
        }
        let bos_count = self.source_ids.iter().filter(|&&id| id == BOS_ID).count();
        if bos_count != self.bos_positions.len() {
            return Err(Error::invalid(
                "BOS ids in source not all listed in bos_positions",
            ));
        }
        if let Some(&last) = self.target_ids.last() {
            if last != EOS_ID {
                return Err(Error::invalid("target does not end in EOS"));
            }
        }
        Ok(())
    }
}

/// Source-side fragment of an [`EncodedExample`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SourceEncoding {
    pub ids: Vec<u32>,
    pub bos_positions: Vec<usize>,
    pub segment_ids: Vec<u32>,
}

impl SourceEncoding {
    fn push_unit(&mut self, tokens: impl IntoIterator<Item = u32>, segment: u32) {
        self.bos_positions.push(self.ids.len());
        self.ids.push(BOS_ID);
        self.segment_ids.push(segment);
        for t in tokens {
            self.ids.push(t);
            self.segment_ids.push(segment);
        }
    }

    /// Cuts to `max_len`, then removes a trailing BOS left without content.
    fn truncate(&mut self, max_len: usize) {
        self.ids.truncate(max_len);
        self.segment_ids.truncate(max_len);
        if self.ids.last() == Some(&BOS_ID) {
            self.ids.pop();
            self.segment_ids.pop();
        }
        let len = self.ids.len();
        self.bos_positions.retain(|&p| p < len);
    }
}

/// `BOS s1 BOS s2 ...` with every sentence prefixed by its own BOS.
///
/// Sentences without tokens are skipped.
pub fn encode_document<S: AsRef<str>>(
    sentences: &[S],
    vocab: &Vocabulary,
    max_source_len: usize,
) -> Result<SourceEncoding> {
    if max_source_len < 2 {
        return Err(Error::invalid("max_source_len must be at least 2"));
    }
    let mut enc = SourceEncoding::default();
    for s in sentences {
        let ids = vocab.encode(s.as_ref());
        if !ids.is_empty() {
            enc.push_unit(ids, 0);
        }
    }
    if enc.ids.is_empty() {
        return Err(Error::invalid("document has no sentences"));
    }
    enc.truncate(max_source_len);
    Ok(enc)
}

/// One BOS-prefixed unit per speaker turn: `BOS role utterance`.
///
/// Each distinct role gets a segment id in order of first appearance.
pub fn encode_conversation<R: AsRef<str>, U: AsRef<str>>(
    turns: &[(R, U)],
    vocab: &Vocabulary,
    max_segments: usize,
    max_source_len: usize,
) -> Result<SourceEncoding> {
    if turns.is_empty() {
        return Err(Error::invalid("conversation has no turns"));
    }
    if max_source_len < 2 {
        return Err(Error::invalid("max_source_len must be at least 2"));
    }
    let mut roles: Vec<&str> = Vec::new();
    let mut enc = SourceEncoding::default();
    for (role, utterance) in turns {
        let role = role.as_ref().trim();
        if role.is_empty() {
            return Err(Error::invalid("empty role string"));
        }
        let segment = match roles.iter().position(|r| *r == role) {
            Some(i) => i,
            None => {
                roles.push(role);
                if roles.len() > max_segments {
                    return Err(Error::invalid(format!(
                        "conversation has more than {max_segments} distinct roles"
                    )));
                }
                roles.len() - 1
            }
        };
        let ids = tokenize(role)
            .chain(tokenize(utterance.as_ref()))
            .map(|t| vocab.id(t));
        enc.push_unit(ids, segment as u32);
    }
    enc.truncate(max_source_len);
    Ok(enc)
}

/// Target tokens followed by EOS, at most `max_target_len` ids in total.
pub fn encode_target(text: &str, vocab: &Vocabulary, max_target_len: usize) -> Result<Vec<u32>> {
    if max_target_len == 0 {
        return Err(Error::invalid("max_target_len must be positive"));
    }
    let mut ids = vocab.encode(text);
    ids.truncate(max_target_len - 1);
    ids.push(EOS_ID);
    Ok(ids)
}
