//! Word-level vocabulary, tokenizer, and encoded token sequences.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

/// Special tokens in id order.
pub const SPECIALS: [&str; 5] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

#[inline]
pub fn is_special(id: usize) -> bool {
    id < SPECIALS.len()
}

/// Bijective token/id map. Ids `0..5` are the specials, content tokens follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

/// One whitespace chunk of raw text after tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Word(String),
    Special(&'a str),
}

/// Lowercases and splits on whitespace and punctuation. Chunks spelled exactly
/// like a special token are kept verbatim.
pub fn tokenize(text: &str) -> Vec<String> {
    pieces(text)
        .into_iter()
        .map(|p| match p {
            Piece::Word(w) => w,
            Piece::Special(s) => s.to_string(),
        })
        .collect()
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if let Some(&special) = SPECIALS.iter().find(|&&s| s == chunk) {
            out.push(Piece::Special(special));
            continue;
        }
        for word in chunk.split(|c: char| !c.is_alphanumeric()) {
            if !word.is_empty() {
                out.push(Piece::Word(word.to_lowercase()));
            }
        }
    }
    out
}

impl Vocabulary {
    /// Counts words over `corpus`, keeps those seen at least `min_freq` times,
    /// and orders them by descending frequency (ties lexicographic). The
    /// result holds at most `max_size` tokens including the five specials.
    pub fn build<'c, I>(corpus: I, max_size: usize, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'c str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut saw_text = false;
        for doc in corpus {
            saw_text = true;
            for piece in pieces(doc) {
                if let Piece::Word(w) = piece {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        if !saw_text || counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        if max_size <= SPECIALS.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "max_size {max_size} leaves no room for content tokens"
            )));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        // BTreeMap iteration is lexicographic; a stable sort keeps that order among ties
        ranked.sort_by_key(|r| core::cmp::Reverse(r.1));
        ranked.truncate(max_size - SPECIALS.len());
        if ranked.is_empty() {
            return Err(Error::Empty("vocabulary after min_freq filter"));
        }
        Self::from_tokens(ranked.into_iter().map(|(w, _)| w))
    }

    /// Builds a vocabulary from content tokens in id order (specials are
    /// prepended).
    pub fn from_tokens<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content.into_iter().map(Into::into));
        Self::from_full_list(tokens)
    }

    /// Builds from the complete token list, which must start with the
    /// specials in canonical order.
    pub fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= SPECIALS.len() {
            return Err(Error::InvalidArgument("vocabulary needs at least one content token".into()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::InvalidArgument(alloc::format!(
                    "id {i} must be {s}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::InvalidArgument(alloc::format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(alloc::format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Encodes `text` as `[CLS] words... [SEP] [PAD]...` of length `n_max`.
    /// Words beyond `n_max - 2` are dropped; unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str, n_max: usize) -> Result<TokenSeq> {
        if n_max < 3 {
            return Err(Error::InvalidArgument(alloc::format!("n_max must be >= 3, got {n_max}")));
        }
        let mut ids = Vec::with_capacity(n_max);
        ids.push(CLS);
        for piece in pieces(text) {
            let id = match piece {
                Piece::Word(w) => self.id(&w).unwrap_or(UNK),
                Piece::Special("[MASK]") => MASK,
                Piece::Special("[UNK]") => UNK,
                // structural specials are re-created below
                Piece::Special(_) => continue,
            };
            if ids.len() == n_max - 1 {
                break;
            }
            ids.push(id);
        }
        ids.push(SEP);
        ids.resize(n_max, PAD);
        let mask = ids.iter().map(|&id| id != PAD).collect();
        TokenSeq::new(ids, mask)
    }

    /// Space-joined rendering; specials appear as their bracketed names.
    pub fn decode_ids(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }
}

/// Encoded input: token ids, attention flags, and the distinct content ids
/// in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
    mask: Vec<bool>,
    unique: Vec<usize>,
}

impl TokenSeq {
    /// `[PAD]` positions are forced to `mask = false`.
    pub fn new(ids: Vec<usize>, mut mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} ids but {} mask flags",
                ids.len(),
                mask.len()
            )));
        }
        for (m, &id) in mask.iter_mut().zip(&ids) {
            if id == PAD {
                *m = false;
            }
        }
        let mut seen = BTreeSet::new();
        let unique = ids
            .iter()
            .copied()
            .filter(|&id| !is_special(id) && seen.insert(id))
            .collect();
        Ok(Self { ids, mask, unique })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// The `T` distinct non-special ids, first-appearance order.
    pub fn unique_content_ids(&self) -> &[usize] {
        &self.unique
    }

    /// Positions holding a content (non-special) token.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| !is_special(self.ids[i])).collect()
    }

    /// Positions of each unique content id, aligned with
    /// [`unique_content_ids`](Self::unique_content_ids).
    pub fn positions_by_token(&self) -> Vec<Vec<usize>> {
        self.unique
            .iter()
            .map(|&u| (0..self.ids.len()).filter(|&i| self.ids[i] == u).collect())
            .collect()
    }

    /// Copy with `positions` replaced by `[MASK]` and removed from attention.
    pub fn with_hidden(&self, positions: &[usize]) -> TokenSeq {
        let mut ids = self.ids.clone();
        let mut mask = self.mask.clone();
        for &p in positions {
            ids[p] = MASK;
            mask[p] = false;
        }
        // cannot fail: lengths unchanged
        TokenSeq::new(ids, mask).expect("same-length perturbation")
    }

    /// Copy with a different id at `position`, attention flag untouched.
    pub fn with_token(&self, position: usize, id: usize) -> TokenSeq {
        let mut ids = self.ids.clone();
        ids[position] = id;
        TokenSeq::new(ids, self.mask.clone()).expect("same-length perturbation")
    }
}
