//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three
//! special ids.

use crate::error::{Result, VkdError};

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const MASK: usize = 258;
/// End of a generated sequence. Shares the padding id: the decoder never
/// attends to padding, so the id is free to serve as a stop marker.
pub const EOS: usize = PAD;
pub const VOCAB_SIZE: usize = 259;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Decodes byte ids, stopping at the first EOS and skipping other specials.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .take_while(|&&i| i != EOS)
        .filter(|&&i| i < 256)
        .map(|&i| i as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn is_special(id: usize) -> bool {
    id >= 256
}

pub fn check_ids(ids: &[usize]) -> Result<()> {
    match ids.iter().find(|&&i| i >= VOCAB_SIZE) {
        Some(bad) => Err(VkdError::input(format!("token id {} out of vocabulary {}", bad, VOCAB_SIZE))),
        None => Ok(()),
    }
}

/// Whitespace-separated words, used by the evaluation metrics.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Right-padded id matrix with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TokenBatch {
    /// Pads every sequence to the longest one. Sequences longer than
    /// `max_len` are cut when `truncate` is set and rejected otherwise.
    pub fn from_sequences(seqs: &[Vec<usize>], max_len: usize, truncate: bool) -> Result<Self> {
        if seqs.is_empty() {
            return Err(VkdError::input("empty token batch"));
        }
        for s in seqs {
            check_ids(s)?;
            if s.is_empty() {
                return Err(VkdError::input("empty token sequence"));
            }
            if s.len() > max_len && !truncate {
                return Err(VkdError::Truncation { len: s.len(), max: max_len });
            }
        }
        let len = seqs.iter().map(|s| s.len().min(max_len)).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let s = &s[..s.len().min(max_len)];
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
            valid.extend(std::iter::repeat_n(true, s.len()));
            valid.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Ok(TokenBatch { batch: seqs.len(), len, ids, valid })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn valid_row(&self, b: usize) -> &[bool] {
        &self.valid[b * self.len..(b + 1) * self.len]
    }

    pub fn valid_rows(&self) -> Vec<Vec<bool>> {
        (0..self.batch).map(|b| self.valid_row(b).to_vec()).collect()
    }

    /// Unpadded sequence of sample `b`.
    pub fn sequence(&self, b: usize) -> Vec<usize> {
        self.row(b)
            .iter()
            .zip(self.valid_row(b))
            .filter(|(_, &v)| v)
            .map(|(&i, _)| i)
            .collect()
    }
}
