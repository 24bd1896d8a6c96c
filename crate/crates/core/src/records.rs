//! Dataset record shapes: retriever triples, translation triples and
//! benchmark instances.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::KnowledgeGraph;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("unknown entity id {0:?}")]
    DanglingId(String),
    #[error("positive entity {0:?} also listed as a negative")]
    PositiveInNegatives(String),
    #[error("instance has no reference translation")]
    NoReferences,
    #[error("gold entity {0:?} has no target-language name")]
    EmptyGoldNames(String),
    #[error("empty {0}")]
    EmptyField(&'static str),
}

fn check_id(kg: Option<&KnowledgeGraph>, id: &str) -> Result<(), RecordError> {
    match kg {
        Some(kg) if kg.get(id).is_none() => Err(RecordError::DanglingId(id.into())),
        _ => Ok(()),
    }
}

/// Query text with one relevant and several irrelevant entities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverExample {
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<String>,
}

impl RetrieverExample {
    pub fn validate(&self, kg: Option<&KnowledgeGraph>) -> Result<(), RecordError> {
        if self.negatives.contains(&self.positive) {
            return Err(RecordError::PositiveInNegatives(self.positive.clone()));
        }
        check_id(kg, &self.positive)?;
        self.negatives.iter().try_for_each(|n| check_id(kg, n))
    }
}

/// Parallel sentence pair with the ids of the entities it mentions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationExample {
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub gold_entities: Vec<String>,
}

impl TranslationExample {
    pub fn validate(&self, kg: Option<&KnowledgeGraph>) -> Result<(), RecordError> {
        if self.source.trim().is_empty() {
            return Err(RecordError::EmptyField("source"));
        }
        self.gold_entities.iter().try_for_each(|id| check_id(kg, id))
    }
}

/// A gold entity with every valid target-language name for it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldEntity {
    pub id: String,
    pub names_tgt: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkInstance {
    pub source: String,
    pub references: Vec<String>,
    #[serde(default)]
    pub entities: Vec<GoldEntity>,
}

impl BenchmarkInstance {
    pub fn validate(&self, kg: Option<&KnowledgeGraph>) -> Result<(), RecordError> {
        if self.references.is_empty() {
            return Err(RecordError::NoReferences);
        }
        for e in &self.entities {
            if e.names_tgt.is_empty() || e.names_tgt.iter().any(|n| n.trim().is_empty()) {
                return Err(RecordError::EmptyGoldNames(e.id.clone()));
            }
            check_id(kg, &e.id)?;
        }
        Ok(())
    }
}
