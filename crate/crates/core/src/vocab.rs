//! Token vocabulary and the whitespace tokenizer.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, LanguageCode};
use crate::text::split_tokens;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const KG: &str = "[KG]";
pub const ARROW: &str = "→";
pub const SEP: &str = ";";

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 7] = [PAD, UNK, BOS, EOS, KG, ARROW, SEP];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const KG_ID: u32 = 4;
pub const ARROW_ID: u32 = 5;
pub const SEP_ID: u32 = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("token ids are not contiguous from 0 (missing id {0})")]
    NonContiguous(u32),
    #[error("reserved token {token:?} must have id {expected}")]
    ReservedMisplaced { token: String, expected: u32 },
    #[error("token {0:?} appears more than once")]
    DuplicateToken(String),
}

/// Ordered token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

pub fn lang_tag(lang: &LanguageCode) -> String {
    format!("<lang:{lang}>")
}

/// Bidirectional token ↔ id map with contiguous ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Reserved tokens, then one tag per language, then every other token
    /// in lexicographic order.
    pub fn build<'a>(languages: impl IntoIterator<Item = &'a LanguageCode>, texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let tags: BTreeSet<String> = languages.into_iter().map(lang_tag).collect();
        tokens.extend(tags);
        let mut words = BTreeSet::new();
        for t in texts {
            for w in split_tokens(t) {
                words.insert(w);
            }
        }
        let mut ids: BTreeMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for w in words {
            if !ids.contains_key(w) {
                ids.insert(w.to_string(), tokens.len() as u32);
                tokens.push(w.to_string());
            }
        }
        Self { tokens, ids }
    }

    /// Vocabulary over every name and description in the graph plus `extra`.
    pub fn from_kg<'a>(kg: &'a KnowledgeGraph, extra: impl IntoIterator<Item = &'a str>) -> Self {
        let mut texts: Vec<&str> = Vec::new();
        for e in kg.entities() {
            for names in e.names.values() {
                texts.extend(names.iter().map(String::as_str));
            }
            texts.extend(e.descriptions.values().map(String::as_str));
        }
        texts.extend(extra);
        Self::build(kg.languages(), texts)
    }

    pub fn from_map(map: &BTreeMap<String, u32>) -> Result<Self, VocabError> {
        let mut tokens: Vec<Option<String>> = alloc::vec![None; map.len()];
        for (tok, &id) in map {
            match tokens.get_mut(id as usize) {
                Some(slot @ None) => *slot = Some(tok.clone()),
                Some(Some(_)) => return Err(VocabError::DuplicateToken(tok.clone())),
                None => return Err(VocabError::NonContiguous(map.len() as u32)),
            }
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or(VocabError::NonContiguous(i as u32)))
            .collect::<Result<_, _>>()?;
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens[i] != *r {
                return Err(VocabError::ReservedMisplaced { token: r.to_string(), expected: i as u32 });
            }
        }
        Ok(Self { tokens, ids: map.clone() })
    }

    pub fn to_map(&self) -> &BTreeMap<String, u32> {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn lang_id(&self, lang: &LanguageCode) -> Option<u32> {
        self.id(&lang_tag(lang))
    }

    /// Token ids of `s` without BOS/EOS.
    pub fn ids_of(&self, s: &str) -> Vec<u32> {
        split_tokens(s).into_iter().map(|w| self.id_or_unk(w)).collect()
    }

    /// `[BOS, tokens…, EOS]`, truncated to `max_len` while keeping both
    /// markers.
    pub fn tokenize(&self, s: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
        let mut ids = Vec::with_capacity(max_len.min(32));
        ids.push(BOS_ID);
        ids.extend(split_tokens(s).into_iter().take(max_len - 2).map(|w| self.id_or_unk(w)));
        ids.push(EOS_ID);
        TokenSequence(ids)
    }

    /// Joins non-reserved tokens with single spaces; stops at EOS.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS_ID {
                break;
            }
            if (id as usize) < RESERVED.len() && id != ARROW_ID && id != SEP_ID {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            if tok.starts_with("<lang:") {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}
