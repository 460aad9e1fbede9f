//! Frequency-ranked word-level vocabulary and sequence encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token to id bijection with the five reserved tokens at ids 0-4.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Rebuild the lookup map after construction or deserialization.
    fn reindex(mut self) -> Self {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        self
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if RESERVED.contains(&t.as_str()) {
                return Err(Error::Vocab(format!("token {t} collides with a reserved token")));
            }
            id_to_token.push(t);
        }
        let v = Vocabulary {
            id_to_token,
            token_to_id: HashMap::new(),
        }
        .reindex();
        if v.token_to_id.len() != v.id_to_token.len() {
            return Err(Error::Vocab("duplicate token in vocabulary".into()));
        }
        Ok(v)
    }

    /// Called after deserialization to restore the lookup map.
    pub fn restore(self) -> Self {
        self.reindex()
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Lowercase and split on whitespace and punctuation (any non-alphanumeric
/// character is a separator).
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Build a vocabulary from corpus lines: tokens ranked by frequency (ties
/// broken lexicographically), keeping the top `size - 5` after the reserved
/// tokens.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, size: usize) -> Result<Vocabulary> {
    if size < 6 {
        return Err(Error::Vocab(format!(
            "vocabulary size {size} leaves no room beyond the 5 reserved tokens"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut saw_line = false;
    for line in corpus {
        saw_line = true;
        for tok in tokenize(line) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if !saw_line || counts.is_empty() {
        return Err(Error::Vocab("empty corpus".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(size - 5);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
}

/// One tokenized example ready for the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    /// 1 on non-[PAD] positions.
    pub mask: Vec<u8>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encode a sentence or sentence pair as
/// `[CLS] a... [SEP]` or `[CLS] a... [SEP] b... [SEP]`, truncated to
/// `max_len` (pairs lose tokens from the longer side first) and padded
/// with `[PAD]`.
pub fn encode(
    text_a: &str,
    text_b: Option<&str>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedInput> {
    if max_len < 3 {
        return Err(Error::Vocab(format!("max_len {max_len} < 3")));
    }
    let mut a: Vec<u32> = tokenize(text_a).iter().map(|t| vocab.id(t)).collect();
    match text_b {
        None => {
            a.truncate(max_len - 2);
            let mut ids = Vec::with_capacity(max_len);
            ids.push(CLS_ID);
            ids.extend(&a);
            ids.push(SEP_ID);
            finish(ids, None, max_len)
        }
        Some(tb) => {
            let mut b: Vec<u32> = tokenize(tb).iter().map(|t| vocab.id(t)).collect();
            let budget = max_len - 3;
            while a.len() + b.len() > budget {
                if a.len() >= b.len() {
                    a.pop();
                } else {
                    b.pop();
                }
            }
            let mut ids = Vec::with_capacity(max_len);
            ids.push(CLS_ID);
            ids.extend(&a);
            ids.push(SEP_ID);
            let boundary = ids.len();
            ids.extend(&b);
            ids.push(SEP_ID);
            finish(ids, Some(boundary), max_len)
        }
    }
}

fn finish(mut ids: Vec<u32>, b_start: Option<usize>, max_len: usize) -> Result<EncodedInput> {
    let used = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut segment_ids = vec![0u8; max_len];
    if let Some(start) = b_start {
        for s in segment_ids.iter_mut().take(used).skip(start) {
            *s = 1;
        }
    }
    let mut mask = vec![0u8; max_len];
    for m in mask.iter_mut().take(used) {
        *m = 1;
    }
    Ok(EncodedInput {
        ids,
        segment_ids,
        mask,
    })
}
