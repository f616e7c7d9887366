use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_RESERVED: u32 = 4;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const MASK_TOKEN: &str = "<mask>";

/// Whitespace tokenization; the interface every encoder consumes.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Word-level vocabulary with four reserved ids (PAD, BOS, EOS, UNK).
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<&str>())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens in id order, skipping
    /// duplicates and reserved strings.
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for t in RESERVED_TOKENS {
            vocab.insert(t);
        }
        for t in tokens {
            let t = t.as_ref();
            if !RESERVED_TOKENS.contains(&t) {
                vocab.insert(t);
            }
        }
        vocab
    }

    /// Frequency-ranked induction over whitespace tokens.
    ///
    /// Keeps at most `max_size` non-reserved tokens seen at least `min_freq`
    /// times, ordered by descending count and then lexicographically.
    pub fn build<S: AsRef<str>>(
        corpus: impl IntoIterator<Item = S>,
        max_size: usize,
        min_freq: usize,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok.to_owned()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(token.to_owned());
        self.token_to_id.insert(token.to_owned(), id);
        id
    }

    /// Appends a token if absent and returns its id.
    pub fn add_token(&mut self, token: &str) -> u32 {
        self.insert(token)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == NUM_RESERVED as usize
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, stopping at the first EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS_ID)
            .filter(|&&id| id != PAD_ID && id != BOS_ID)
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK_ID as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line; line `i` (0-based) holds id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.id_to_token[NUM_RESERVED as usize..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab = Self::from_tokens(text.lines().filter(|l| !l.is_empty()));
        let expected = text.lines().filter(|l| !l.is_empty()).count() + NUM_RESERVED as usize;
        if vocab.len() != expected {
            return Err(Error::invalid(format!(
                "{}: duplicate or reserved tokens in vocabulary file",
                path.display()
            )));
        }
        Ok(vocab)
    }
}
