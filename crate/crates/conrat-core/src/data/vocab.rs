//! Whitespace tokenizer and vocabulary.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercased whitespace tokens plus their byte offsets `[start, end)` into
/// the original text. Lowercasing happens after slicing, so
/// `text[start..end].to_lowercase() == token` always holds.
pub fn tokenize_with_offsets(text: &str) -> (Vec<String>, Vec<(usize, usize)>) {
    let mut tokens = Vec::new();
    let mut offsets = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                tokens.push(text[s..i].to_lowercase());
                offsets.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(text[s..].to_lowercase());
        offsets.push((s, text.len()));
    }
    (tokens, offsets)
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).0
}

/// Token-to-index map with reserved pad (0) and unknown (1) entries.
/// Indices follow first-encounter order over the corpus it was built from,
/// so the mapping is a pure function of the token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    /// Embedding dimension the vocabulary is paired with.
    pub dim: usize,
}

impl Vocabulary {
    pub fn build<'a, I>(token_seqs: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut v = Vocabulary {
            index: HashMap::new(),
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            dim,
        };
        v.index.insert(PAD_TOKEN.to_string(), PAD);
        v.index.insert(UNK_TOKEN.to_string(), UNK);
        for seq in token_seqs {
            for tok in seq {
                if !v.index.contains_key(tok) {
                    v.index.insert(tok.clone(), v.tokens.len());
                    v.tokens.push(tok.clone());
                }
            }
        }
        v
    }

    /// Rebuild from an ordered token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>, dim: usize) -> crate::Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(crate::Error::Config(
                "vocabulary token list must start with the pad and unknown tokens".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(crate::Error::Config(format!(
                    "duplicate vocabulary token: {t}"
                )));
            }
        }
        Ok(Vocabulary { index, tokens, dim })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // pad and unk are always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Content hash binding checkpoints to the vocabulary they were trained
    /// with.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
