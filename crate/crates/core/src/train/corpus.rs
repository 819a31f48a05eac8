//! Byte-level corpus ingestion: vocabulary is the 256 byte values plus
//! a BOS marker, windows are non-overlapping with one-token-shift
//! targets.

use crate::error::{Error, Result};
use crate::model::BOS_TOKEN;
use std::path::Path;

/// A tokenized corpus: `[BOS, byte0, byte1, ...]`.
#[derive(Debug, Clone)]
pub struct TokenStream {
    tokens: Vec<u32>,
}

/// Read a file as raw bytes and tokenize.
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<TokenStream> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(TokenStream::from_bytes(&bytes))
}

impl TokenStream {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut tokens = Vec::with_capacity(bytes.len() + 1);
        tokens.push(BOS_TOKEN);
        tokens.extend(bytes.iter().map(|&b| u32::from(b)));
        TokenStream { tokens }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Inverse of tokenization (drops the leading BOS).
    pub fn detokenize(&self) -> Vec<u8> {
        self.tokens[1..].iter().map(|&t| t as u8).collect()
    }

    /// Number of full non-overlapping windows: `floor((N - 1) / seq_len)`
    /// (every window needs `seq_len` inputs plus one lookahead target).
    pub fn window_count(&self, seq_len: usize) -> usize {
        (self.tokens.len() - 1) / seq_len
    }

    /// Inputs and one-token-shifted targets of window `idx`.
    pub fn window(&self, idx: usize, seq_len: usize) -> (&[u32], &[u32]) {
        let start = idx * seq_len;
        (
            &self.tokens[start..start + seq_len],
            &self.tokens[start + 1..start + seq_len + 1],
        )
    }

    /// Sub-stream over a token range (used for evaluation slices).
    pub fn slice(&self, start: usize, len: usize) -> TokenStream {
        TokenStream { tokens: self.tokens[start..start + len].to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ab_tokenizes_with_bos() {
        let s = TokenStream::from_bytes(b"ab");
        assert_eq!(s.tokens(), &[BOS_TOKEN, 97, 98]);
    }

    #[test]
    fn round_trip_detokenize() {
        let raw = b"hello, \xffworld\x00!";
        let s = TokenStream::from_bytes(raw);
        assert_eq!(s.detokenize(), raw);
    }

    #[test]
    fn window_count_arithmetic() {
        // N = 10 tokens (BOS + 9 bytes): floor(9/4) = 2 windows of 4.
        let s = TokenStream::from_bytes(&[7u8; 9]);
        assert_eq!(s.len(), 10);
        assert_eq!(s.window_count(4), 2);
        let (inp, tgt) = s.window(0, 4);
        assert_eq!(inp.len(), 4);
        assert_eq!(tgt.len(), 4);
        assert_eq!(inp[0], BOS_TOKEN);
        assert_eq!(tgt[0], 7);
        let (inp1, _) = s.window(1, 4);
        assert_eq!(inp1[0], 7);
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, b"").unwrap();
        assert!(matches!(ingest_corpus(&p), Err(Error::EmptyCorpus(_))));
    }
}
