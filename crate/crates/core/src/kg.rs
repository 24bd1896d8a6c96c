//! Multilingual knowledge graph: entities with per-language names and
//! descriptions, a normalized name index, and homonym lookup.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_name;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KgError {
    #[error("invalid language code {0:?} (expected [a-z0-9-]{{2,8}})")]
    InvalidLanguage(String),
    #[error("line {line}: duplicate entity id {id:?}")]
    DuplicateId { id: String, line: usize },
    #[error("line {line}: entity {id:?} has an empty name in {lang}")]
    EmptyName { id: String, lang: String, line: usize },
    #[error("line {line}: entity {id:?} has an empty name list in {lang}")]
    EmptyNameList { id: String, lang: String, line: usize },
    #[error("line {line}: entity id is empty")]
    EmptyId { line: usize },
    #[error("relation ({subject}, {label}, {object}) references unknown entity {missing:?}")]
    DanglingRelation { subject: String, label: String, object: String, missing: String },
    #[error("entity {id:?} has no name in {lang}")]
    MissingLanguage { id: String, lang: String },
    #[error("unknown entity id {0:?}")]
    UnknownEntity(String),
}

/// Short lowercase language identifier such as `en` or `xx-src`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn new(code: &str) -> Result<Self, KgError> {
        let ok = (2..=8).contains(&code.len())
            && code.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-');
        if ok {
            Ok(Self(code.to_owned()))
        } else {
            Err(KgError::InvalidLanguage(code.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for LanguageCode {
    type Error = KgError;
    fn try_from(s: String) -> Result<Self, KgError> {
        Self::new(&s)
    }
}

impl From<LanguageCode> for String {
    fn from(l: LanguageCode) -> String {
        l.0
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    /// First name per language is the primary name; the rest are aliases.
    pub names: BTreeMap<LanguageCode, Vec<String>>,
    pub descriptions: BTreeMap<LanguageCode, String>,
}

impl Entity {
    pub fn primary_name(&self, lang: &LanguageCode) -> Option<&str> {
        self.names.get(lang).and_then(|n| n.first()).map(String::as_str)
    }

    pub fn names_in(&self, lang: &LanguageCode) -> &[String] {
        self.names.get(lang).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_language(&self, lang: &LanguageCode) -> bool {
        self.names.contains_key(lang)
    }
}

/// `(subject, relation label, object)`.
pub type Relation = (String, String, String);

/// One line of the JSONL knowledge-graph file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KgRecord {
    pub id: String,
    pub names: BTreeMap<LanguageCode, Vec<String>>,
    #[serde(default)]
    pub descriptions: BTreeMap<LanguageCode, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<Relation>,
}

/// Counts reported after building a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub entities: usize,
    /// Entities with no name in any of the filtered languages.
    pub dropped: usize,
    pub relations: usize,
}

/// Accumulates validated records; [`KgBuilder::finish`] checks relation
/// endpoints and builds the name index.
#[derive(Debug, Default)]
pub struct KgBuilder {
    filter: Option<BTreeSet<LanguageCode>>,
    entities: BTreeMap<String, Entity>,
    dropped_ids: BTreeSet<String>,
    relations: Vec<Relation>,
}

impl KgBuilder {
    pub fn new(language_filter: Option<BTreeSet<LanguageCode>>) -> Self {
        Self { filter: language_filter, ..Self::default() }
    }

    /// `line` is 1-based and only used in error messages.
    pub fn add(&mut self, record: KgRecord, line: usize) -> Result<(), KgError> {
        let KgRecord { id, names, descriptions, relations } = record;
        if id.trim().is_empty() {
            return Err(KgError::EmptyId { line });
        }
        if self.entities.contains_key(&id) || self.dropped_ids.contains(&id) {
            return Err(KgError::DuplicateId { id, line });
        }
        for (lang, list) in &names {
            if list.is_empty() {
                return Err(KgError::EmptyNameList { id, lang: lang.to_string(), line });
            }
            if list.iter().any(|n| n.trim().is_empty()) {
                return Err(KgError::EmptyName { id, lang: lang.to_string(), line });
            }
        }
        self.relations.extend(relations);
        let keep = |l: &LanguageCode| self.filter.as_ref().is_none_or(|f| f.contains(l));
        let names: BTreeMap<_, _> = names.into_iter().filter(|(l, _)| keep(l)).collect();
        let descriptions = descriptions.into_iter().filter(|(l, _)| keep(l)).collect();
        if names.is_empty() {
            self.dropped_ids.insert(id);
            return Ok(());
        }
        self.entities.insert(id.clone(), Entity { id, names, descriptions });
        Ok(())
    }

    pub fn finish(self) -> Result<(KnowledgeGraph, LoadStats), KgError> {
        let mut relations = Vec::with_capacity(self.relations.len());
        for (s, r, o) in self.relations {
            let mut skip = false;
            let mut missing = None;
            for end in [&s, &o] {
                if !self.entities.contains_key(end) {
                    if self.dropped_ids.contains(end) {
                        skip = true;
                    } else {
                        missing = Some(end.clone());
                        break;
                    }
                }
            }
            if let Some(missing) = missing {
                return Err(KgError::DanglingRelation { subject: s, label: r, object: o, missing });
            }
            if !skip {
                relations.push((s, r, o));
            }
        }
        let stats = LoadStats {
            entities: self.entities.len(),
            dropped: self.dropped_ids.len(),
            relations: relations.len(),
        };
        Ok((KnowledgeGraph::assemble(self.entities, relations), stats))
    }
}

/// Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    relations: Vec<Relation>,
    name_index: BTreeMap<LanguageCode, BTreeMap<String, BTreeSet<String>>>,
}

impl KnowledgeGraph {
    /// Builds a graph from entities that are already known to be valid.
    pub fn from_entities(entities: impl IntoIterator<Item = Entity>) -> Result<Self, KgError> {
        let mut b = KgBuilder::new(None);
        for (i, e) in entities.into_iter().enumerate() {
            b.add(KgRecord { id: e.id, names: e.names, descriptions: e.descriptions, relations: Vec::new() }, i + 1)?;
        }
        Ok(b.finish()?.0)
    }

    fn assemble(entities: BTreeMap<String, Entity>, relations: Vec<Relation>) -> Self {
        let mut name_index: BTreeMap<LanguageCode, BTreeMap<String, BTreeSet<String>>> = BTreeMap::new();
        for e in entities.values() {
            for (lang, names) in &e.names {
                let per_lang = name_index.entry(lang.clone()).or_default();
                for n in names {
                    per_lang.entry(normalize_name(n)).or_default().insert(e.id.clone());
                }
            }
        }
        Self { entities, relations, name_index }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    /// Entities in ascending id order.
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageCode> {
        self.name_index.keys()
    }

    /// Ids of entities carrying `name` (after normalization) in `lang`.
    pub fn lookup(&self, lang: &LanguageCode, name: &str) -> Option<&BTreeSet<String>> {
        self.name_index.get(lang)?.get(&normalize_name(name))
    }

    /// One record per entity, relations attached to their subject's line.
    pub fn to_records(&self) -> Vec<KgRecord> {
        let mut by_subject: BTreeMap<&str, Vec<Relation>> = BTreeMap::new();
        for rel in &self.relations {
            by_subject.entry(rel.0.as_str()).or_default().push(rel.clone());
        }
        self.entities
            .values()
            .map(|e| KgRecord {
                id: e.id.clone(),
                names: e.names.clone(),
                descriptions: e.descriptions.clone(),
                relations: by_subject.remove(e.id.as_str()).unwrap_or_default(),
            })
            .collect()
    }
}

/// `"<primary name>: <description>"`, or the primary name alone when the
/// entity has no description in `lang`.
pub fn entity_text(e: &Entity, lang: &LanguageCode) -> Result<String, KgError> {
    let name = e
        .primary_name(lang)
        .ok_or_else(|| KgError::MissingLanguage { id: e.id.clone(), lang: lang.to_string() })?;
    Ok(match e.descriptions.get(lang) {
        Some(d) if !d.trim().is_empty() => format!("{name}: {d}"),
        _ => name.to_owned(),
    })
}

/// Entities other than `e` sharing at least one normalized name with it in
/// `lang`, in ascending id order.
pub fn homonyms_of<'a>(kg: &'a KnowledgeGraph, e: &Entity, lang: &LanguageCode) -> Vec<&'a Entity> {
    let mut ids = BTreeSet::new();
    for n in e.names_in(lang) {
        if let Some(set) = kg.lookup(lang, n) {
            ids.extend(set.iter().filter(|id| **id != e.id));
        }
    }
    ids.into_iter().filter_map(|id| kg.get(id)).collect()
}
