//! Closed character vocabulary for the miniature LM.
//!
//! Four special ids sit below the character block: PAD (0), BOS (1), SEP (2,
//! the question/answer boundary) and EOS (3). Character ids are dense above
//! them, so `vocab_size = 4 + charset.len()`.

use std::collections::BTreeMap;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const EOS: TokenId = 3;
const SPECIALS: usize = 4;

/// Characters the standard desk-scale vocabulary covers.
pub const STANDARD_CHARSET: &str =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 ?.,'-";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VocabError {
    #[error("unknown symbol {symbol:?} at offset {position}")]
    UnknownSymbol { position: usize, symbol: char },
    #[error("duplicate symbol {0:?} in charset")]
    DuplicateSymbol(char),
    #[error("charset is empty")]
    EmptyCharset,
}

/// Bijective symbol <-> id map over a fixed charset.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    symbols: Vec<char>,
    ids: BTreeMap<char, TokenId>,
}

impl Vocab {
    pub fn from_charset(charset: &str) -> Result<Self, VocabError> {
        if charset.is_empty() {
            return Err(VocabError::EmptyCharset);
        }
        let mut symbols = Vec::new();
        let mut ids = BTreeMap::new();
        for ch in charset.chars() {
            if ids.insert(ch, SPECIALS + symbols.len()).is_some() {
                return Err(VocabError::DuplicateSymbol(ch));
            }
            symbols.push(ch);
        }
        Ok(Vocab { symbols, ids })
    }

    pub fn standard() -> Self {
        Vocab::from_charset(STANDARD_CHARSET).expect("standard charset is valid")
    }

    /// Total id count, specials included.
    pub fn size(&self) -> usize {
        SPECIALS + self.symbols.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.chars()
            .enumerate()
            .map(|(position, symbol)| {
                self.ids
                    .get(&symbol)
                    .copied()
                    .ok_or(VocabError::UnknownSymbol { position, symbol })
            })
            .collect()
    }

    /// Inverse of [`Vocab::encode`]; special ids are skipped so generated
    /// sequences decode to plain text.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter_map(|&id| {
                if id < SPECIALS {
                    None
                } else {
                    self.symbols.get(id - SPECIALS).copied()
                }
            })
            .collect()
    }

    pub fn contains(&self, ch: char) -> bool {
        self.ids.contains_key(&ch)
    }
}
