//! JSON Lines ingestion and conversion to encoded examples.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::chunk::{chunk_document, AlignedSegment};
use super::encode::{encode_conversation, encode_document, encode_target, EncodedExample};
use super::segment::segment_sentences;
use super::vocab::{tokenize, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: String,
    pub text: String,
}

/// One input line. The variant is picked by which keys are present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawRecord {
    Conversation { turns: Vec<Turn>, target: String },
    Document { source: String, target: String },
    Parallel { segments: Vec<AlignedSegment> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessMode {
    Document,
    Conversation,
    Mt,
}

impl std::str::FromStr for PreprocessMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "document" => Ok(Self::Document),
            "conversation" => Ok(Self::Conversation),
            "mt" => Ok(Self::Mt),
            other => Err(Error::invalid(format!(
                "unknown preprocessing mode `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub mode: PreprocessMode,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub max_segments: usize,
    pub chunk_tokens: usize,
    pub vocab_size: usize,
    pub min_freq: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::long_document()
    }
}

impl PreprocessConfig {
    /// Long-document summarization limits.
    pub fn long_document() -> Self {
        PreprocessConfig {
            mode: PreprocessMode::Document,
            max_source_len: 3072,
            max_target_len: 512,
            max_segments: 1,
            chunk_tokens: 512,
            vocab_size: 50_000,
            min_freq: 1,
        }
    }

    /// News-length articles.
    pub fn news() -> Self {
        PreprocessConfig {
            max_source_len: 1024,
            max_target_len: 256,
            ..Self::long_document()
        }
    }

    pub fn conversation() -> Self {
        PreprocessConfig {
            mode: PreprocessMode::Conversation,
            max_segments: 16,
            ..Self::news()
        }
    }

    /// Document translation, split into aligned chunks.
    pub fn translation() -> Self {
        PreprocessConfig {
            mode: PreprocessMode::Mt,
            max_source_len: 512,
            max_target_len: 1024,
            chunk_tokens: 512,
            ..Self::long_document()
        }
    }
}

/// Token-level filter applied to conversational utterances before encoding.
pub trait TokenFilter {
    fn keep(&self, token: &str) -> bool;
}

/// Keeps every token.
#[derive(Clone, Copy, Debug, Default)]
pub struct PassThrough;

impl TokenFilter for PassThrough {
    fn keep(&self, _token: &str) -> bool {
        true
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawRecord>> {
    read_lines(path, |line| {
        serde_json::from_str::<RawRecord>(line).map_err(|e| e.to_string())
    })
}

pub fn read_encoded(path: &Path) -> Result<Vec<EncodedExample>> {
    read_lines(path, |line| {
        serde_json::from_str::<EncodedExample>(line).map_err(|e| e.to_string())
    })
}

fn read_lines<R>(path: &Path, parse: impl Fn(&str) -> Result<R, String>) -> Result<Vec<R>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_encoded(path: &Path, examples: &[EncodedExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::json("encoded example", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// All source and target text, for vocabulary induction.
pub fn corpus_texts(records: &[RawRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for r in records {
        match r {
            RawRecord::Document { source, target } => {
                out.push(source.clone());
                out.push(target.clone());
            }
            RawRecord::Conversation { turns, target } => {
                for t in turns {
                    out.push(format!("{} {}", t.role, t.text));
                }
                out.push(target.clone());
            }
            RawRecord::Parallel { segments } => {
                for s in segments {
                    out.push(s.src.clone());
                    out.push(s.tgt.clone());
                }
            }
        }
    }
    out
}

/// Encodes one record. Translation documents yield one example per chunk.
pub fn encode_record(
    record: &RawRecord,
    vocab: &Vocabulary,
    cfg: &PreprocessConfig,
    filter: &dyn TokenFilter,
) -> Result<Vec<EncodedExample>> {
    match (cfg.mode, record) {
        (PreprocessMode::Document, RawRecord::Document { source, target }) => {
            let sentences = segment_sentences(source);
            let src = encode_document(&sentences, vocab, cfg.max_source_len)?;
            let tgt = encode_target(target, vocab, cfg.max_target_len)?;
            Ok(vec![EncodedExample::from_source(src, tgt)])
        }
        (PreprocessMode::Conversation, RawRecord::Conversation { turns, target }) => {
            let turns: Vec<(&str, String)> = turns
                .iter()
                .map(|t| {
                    let kept: Vec<&str> = tokenize(&t.text).filter(|w| filter.keep(w)).collect();
                    (t.role.as_str(), kept.join(" "))
                })
                .collect();
            let src = encode_conversation(&turns, vocab, cfg.max_segments, cfg.max_source_len)?;
            let tgt = encode_target(target, vocab, cfg.max_target_len)?;
            Ok(vec![EncodedExample::from_source(src, tgt)])
        }
        (PreprocessMode::Mt, RawRecord::Parallel { segments }) => {
            let chunks = chunk_document(segments, cfg.chunk_tokens)?;
            chunks
                .into_iter()
                .map(|range| {
                    let part = &segments[range];
                    let srcs: Vec<&str> = part.iter().map(|s| s.src.as_str()).collect();
                    let tgt: Vec<&str> = part.iter().map(|s| s.tgt.as_str()).collect();
                    let src =
                        encode_document(&srcs, vocab, cfg.max_source_len.max(cfg.chunk_tokens))?;
                    let tgt = encode_target(&tgt.join(" "), vocab, cfg.max_target_len)?;
                    Ok(EncodedExample::from_source(src, tgt))
                })
                .collect()
        }
        (mode, _) => Err(Error::invalid(format!(
            "record does not match preprocessing mode {mode:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::BOS_ID;

    #[test]
    fn untagged_records_parse_by_shape() {
        let doc: RawRecord = serde_json::from_str(r#"{"source": "A. B.", "target": "a"}"#).unwrap();
        assert!(matches!(doc, RawRecord::Document { .. }));
        let conv: RawRecord =
            serde_json::from_str(r#"{"turns": [{"role": "A", "text": "hi"}], "target": "x"}"#)
                .unwrap();
        assert!(matches!(conv, RawRecord::Conversation { .. }));
        let mt: RawRecord =
            serde_json::from_str(r#"{"segments": [{"src": "a", "tgt": "b"}]}"#).unwrap();
        assert!(matches!(mt, RawRecord::Parallel { .. }));
    }

    #[test]
    fn document_record_gets_sentence_bos() {
        let rec = RawRecord::Document {
            source: "x y. z!".into(),
            target: "y".into(),
        };
        let vocab = Vocabulary::build(corpus_texts(std::slice::from_ref(&rec)), 100, 1);
        let ex = encode_record(&rec, &vocab, &PreprocessConfig::news(), &PassThrough).unwrap();
        assert_eq!(ex[0].bos_positions, [0, 3]);
        assert_eq!(ex[0].source_ids[3], BOS_ID);
    }

    #[test]
    fn translation_record_is_chunked() {
        let segments = (0..3)
            .map(|i| AlignedSegment {
                src: format!("s{i} w w"),
                tgt: format!("t{i}"),
            })
            .collect();
        let rec = RawRecord::Parallel { segments };
        let vocab = Vocabulary::build(corpus_texts(std::slice::from_ref(&rec)), 100, 1);
        let cfg = PreprocessConfig {
            chunk_tokens: 8,
            ..PreprocessConfig::translation()
        };
        let ex = encode_record(&rec, &vocab, &cfg, &PassThrough).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].bos_positions.len(), 2);
        assert_eq!(vocab.decode(&ex[0].target_ids), "t0 t1");
    }

    #[test]
    fn mode_mismatch_is_an_error() {
        let rec = RawRecord::Document {
            source: "a".into(),
            target: "b".into(),
        };
        let cfg = PreprocessConfig::conversation();
        assert!(encode_record(&rec, &Vocabulary::default(), &cfg, &PassThrough).is_err());
    }

    #[test]
    fn filter_hook_drops_tokens() {
        struct NoUm;
        impl TokenFilter for NoUm {
            fn keep(&self, t: &str) -> bool {
                t != "um"
            }
        }
        let rec = RawRecord::Conversation {
            turns: vec![Turn {
                role: "A".into(),
                text: "um hello".into(),
            }],
            target: "x".into(),
        };
        let vocab = Vocabulary::build(corpus_texts(std::slice::from_ref(&rec)), 100, 1);
        let ex = encode_record(&rec, &vocab, &PreprocessConfig::conversation(), &NoUm).unwrap();
        assert_eq!(ex[0].source_ids.len(), 3);
    }
}
