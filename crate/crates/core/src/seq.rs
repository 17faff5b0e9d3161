//! Vocabularies and fixed-length token sequences with a mask sentinel.
//!
//! Token ids are dense integers in `[0, size)`; the mask sentinel is `size`
//! itself, one past the clean range, so dense tables can be indexed directly
//! by token id.

use crate::error::{Error, Result};

pub type Token = u32;

/// A clean-token alphabet plus the reserved mask sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        Ok(Vocabulary { size })
    }

    #[inline]
    pub fn size(&self) -> u32 {
        self.size
    }

    /// The mask sentinel, never a member of the clean range.
    #[inline]
    pub fn mask_id(&self) -> Token {
        self.size
    }

    #[inline]
    pub fn is_clean_token(&self, t: Token) -> bool {
        t < self.size
    }
}

/// A fixed-length sequence whose positions hold either a clean token or the
/// mask sentinel. Length is immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskedSequence {
    tokens: Vec<Token>,
}

impl MaskedSequence {
    /// Builds a sequence, validating every token against the vocabulary.
    pub fn new(tokens: Vec<Token>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract("sequence length must be positive".into()));
        }
        for (i, &t) in tokens.iter().enumerate() {
            if t > vocab.mask_id() {
                return Err(Error::Contract(format!(
                    "token {t} at position {i} is outside the vocabulary (size {})",
                    vocab.size()
                )));
            }
        }
        Ok(MaskedSequence { tokens })
    }

    pub fn fully_masked(len: usize, vocab: &Vocabulary) -> Self {
        MaskedSequence {
            tokens: vec![vocab.mask_id(); len],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    #[inline]
    pub fn get(&self, i: usize) -> Token {
        self.tokens[i]
    }

    #[inline]
    pub fn is_masked_at(&self, i: usize, vocab: &Vocabulary) -> bool {
        self.tokens[i] == vocab.mask_id()
    }

    /// True when no position holds the mask sentinel.
    pub fn is_clean(&self, vocab: &Vocabulary) -> bool {
        self.tokens.iter().all(|&t| vocab.is_clean_token(t))
    }

    /// All masked positions, ascending.
    pub fn mask_positions(&self, vocab: &Vocabulary) -> Vec<usize> {
        let m = vocab.mask_id();
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn mask_count(&self, vocab: &Vocabulary) -> usize {
        let m = vocab.mask_id();
        self.tokens.iter().filter(|&&t| t == m).count()
    }

    /// Copy with masked position `i` set to clean token `v`.
    ///
    /// Unmasking an already-clean position is a contract violation, as is a
    /// non-clean replacement token.
    pub fn substitute(&self, i: usize, v: Token, vocab: &Vocabulary) -> Result<Self> {
        if i >= self.tokens.len() {
            return Err(Error::Contract(format!(
                "position {i} out of bounds for length {}",
                self.tokens.len()
            )));
        }
        if self.tokens[i] != vocab.mask_id() {
            return Err(Error::Contract(format!(
                "position {i} already holds clean token {}",
                self.tokens[i]
            )));
        }
        if !vocab.is_clean_token(v) {
            return Err(Error::Contract(format!(
                "replacement token {v} is not a clean token"
            )));
        }
        let mut tokens = self.tokens.clone();
        tokens[i] = v;
        Ok(MaskedSequence { tokens })
    }

    /// In-place unmask used by samplers that own the sequence.
    pub(crate) fn set_unchecked(&mut self, i: usize, v: Token) {
        self.tokens[i] = v;
    }
}
