//! Vocabulary files: `{"tokens": [...], "specials": {"[PAD]": 0, ...}}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use decsal_core::vocab::SPECIALS;
use decsal_core::Vocabulary;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabFile {
    /// Every token in id order, specials first.
    pub tokens: Vec<String>,
    pub specials: BTreeMap<String, usize>,
}

impl VocabFile {
    pub fn from_vocab(v: &Vocabulary) -> Self {
        Self {
            tokens: v.tokens().to_vec(),
            specials: SPECIALS.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect(),
        }
    }

    pub fn into_vocab(self) -> Result<Vocabulary> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if self.specials.get(*s) != Some(&i) {
                return Err(HarnessError::Data(format!("vocabulary file must map {s} to id {i}")));
            }
        }
        if self.specials.len() != SPECIALS.len() {
            return Err(HarnessError::Data("vocabulary file lists unknown special tokens".into()));
        }
        Ok(Vocabulary::from_full_list(self.tokens)?)
    }
}

pub fn to_json(v: &Vocabulary) -> String {
    serde_json::to_string_pretty(&VocabFile::from_vocab(v)).expect("plain data serializes")
}

pub fn from_json(text: &str) -> Result<Vocabulary> {
    let file: VocabFile = serde_json::from_str(text).map_err(|e| HarnessError::Data(format!("vocabulary: {e}")))?;
    file.into_vocab()
}

pub fn save(v: &Vocabulary, path: &Path) -> Result<()> {
    fs::write(path, to_json(v)).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    from_json(&text)
}
