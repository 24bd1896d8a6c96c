//! Entity-level translation accuracy (M-ETA), multi-reference BLEU and run
//! reports.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{BenchmarkInstance, GoldEntity};
use crate::text::{normalize_name, split_tokens};

/// Added to zero n-gram match counts.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("instance has no gold entities")]
    EmptyGold,
    #[error("no instance has gold entities")]
    NoScorableInstances,
    #[error("at least one reference is required")]
    NoReferences,
    #[error("{outputs} outputs for {instances} benchmark instances (first unmatched index {index})")]
    Misaligned { outputs: usize, instances: usize, index: usize },
}

/// How instance scores are combined into a corpus score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean of per-instance scores.
    #[default]
    Instance,
    /// Matched entities over all gold entities.
    Micro,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Require the name to start and end on token boundaries.
    pub strict: bool,
    pub aggregation: Aggregation,
}

fn contains_tokens(hay: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// 1 when any normalized name occurs in the normalized translation.
pub fn entity_match(translation: &str, names: &[String], strict: bool) -> u8 {
    let t = normalize_name(translation);
    let toks = if strict { split_tokens(&t) } else { Vec::new() };
    let hit = names.iter().any(|n| {
        let n = normalize_name(n);
        if n.is_empty() {
            return false;
        }
        if strict {
            contains_tokens(&toks, &split_tokens(&n))
        } else {
            t.contains(n.as_str())
        }
    });
    hit as u8
}

/// Number of matched gold entities.
fn matched(translation: &str, golds: &[GoldEntity], strict: bool) -> usize {
    golds.iter().map(|g| entity_match(translation, &g.names_tgt, strict) as usize).sum()
}

/// Fraction of gold entities whose target name appears in `translation`.
pub fn m_eta_instance(translation: &str, golds: &[GoldEntity], strict: bool) -> Result<f64, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    Ok(matched(translation, golds, strict) as f64 / golds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub score: f64,
    pub scored: usize,
    /// Instances without gold entities.
    pub skipped: usize,
}

pub fn m_eta_corpus<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a [GoldEntity])>, opts: MatchOptions) -> Result<CorpusScore, MetricsError> {
    let (mut sum, mut scored, mut skipped, mut hits, mut total) = (0.0, 0usize, 0usize, 0usize, 0usize);
    for (t, golds) in pairs {
        if golds.is_empty() {
            skipped += 1;
            continue;
        }
        let m = matched(t, golds, opts.strict);
        sum += m as f64 / golds.len() as f64;
        hits += m;
        total += golds.len();
        scored += 1;
    }
    if scored == 0 {
        return Err(MetricsError::NoScorableInstances);
    }
    let score = match opts.aggregation {
        Aggregation::Instance => sum / scored as f64,
        Aggregation::Micro => hits as f64 / total as f64,
    };
    Ok(CorpusScore { score, scored, skipped })
}

fn ngram_counts<'a, 'b>(toks: &'b [&'a str], n: usize) -> BTreeMap<&'b [&'a str], usize> {
    let mut m = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of BLEU for one or more segments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        Self { matches: alloc::vec![0; max_n], totals: alloc::vec![0; max_n], cand_len: 0, ref_len: 0 }
    }

    /// Adds one candidate with its references. Counts are clipped by the
    /// maximum count over references; the reference length is the one
    /// closest to the candidate length (the shorter on ties).
    pub fn add(&mut self, candidate: &str, references: &[String]) -> Result<(), MetricsError> {
        if references.is_empty() {
            return Err(MetricsError::NoReferences);
        }
        let c = split_tokens(candidate);
        let refs: Vec<Vec<&str>> = references.iter().map(|r| split_tokens(r)).collect();
        for n in 1..=self.matches.len() {
            let cand = ngram_counts(&c, n);
            let mut max_ref: BTreeMap<&[&str], usize> = BTreeMap::new();
            for r in &refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            self.matches[n - 1] += cand.iter().map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0))).sum::<usize>();
            self.totals[n - 1] += c.len().saturating_sub(n - 1);
        }
        self.cand_len += c.len();
        self.ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c.len()), r))
            .unwrap_or(0);
        Ok(())
    }

    /// Geometric mean of the modified precisions over orders with at
    /// least one candidate n-gram, times the brevity penalty.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if t == 0 {
                continue;
            }
            let m = if m == 0 { BLEU_EPSILON } else { m as f64 };
            log_sum += libm::log(m / t as f64);
            orders += 1;
        }
        let bp = if self.cand_len >= self.ref_len { 1.0 } else { libm::exp(1.0 - self.ref_len as f64 / self.cand_len as f64) };
        bp * libm::exp(log_sum / orders as f64)
    }
}

/// Sentence BLEU of `candidate` against `references`, in `[0, 1]`.
pub fn bleu(candidate: &str, references: &[String], max_n: usize) -> Result<f64, MetricsError> {
    let mut s = BleuStats::new(max_n);
    s.add(candidate, references)?;
    Ok(s.score())
}

/// BLEU from statistics summed over the whole corpus.
pub fn corpus_bleu<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a [String])>, max_n: usize) -> Result<f64, MetricsError> {
    let mut s = BleuStats::new(max_n);
    for (c, refs) in pairs {
        s.add(c, refs)?;
    }
    Ok(s.score())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub index: usize,
    /// M-ETA of this instance; absent for entity-free instances.
    pub q: Option<f64>,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when no instance has gold entities.
    pub m_eta: Option<f64>,
    pub bleu: f64,
    pub n_instances: usize,
    pub n_entity_instances: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hits: Option<BTreeMap<usize, f64>>,
    pub per_instance: Vec<InstanceScore>,
}

/// Corpus M-ETA over entity-bearing instances and corpus BLEU over all.
pub fn evaluate_run(outputs: &[String], benchmark: &[BenchmarkInstance], opts: MatchOptions) -> Result<EvalReport, MetricsError> {
    if outputs.len() != benchmark.len() {
        return Err(MetricsError::Misaligned { outputs: outputs.len(), instances: benchmark.len(), index: outputs.len().min(benchmark.len()) });
    }
    let mut per_instance = Vec::with_capacity(outputs.len());
    for (i, (o, b)) in outputs.iter().zip(benchmark).enumerate() {
        let q = if b.entities.is_empty() { None } else { Some(m_eta_instance(o, &b.entities, opts.strict)?) };
        per_instance.push(InstanceScore { index: i, q, bleu: bleu(o, &b.references, 4)? });
    }
    let m_eta = match m_eta_corpus(outputs.iter().map(String::as_str).zip(benchmark.iter().map(|b| b.entities.as_slice())), opts) {
        Ok(c) => Some(c.score),
        Err(MetricsError::NoScorableInstances) => None,
        Err(e) => return Err(e),
    };
    let bleu = corpus_bleu(outputs.iter().map(String::as_str).zip(benchmark.iter().map(|b| b.references.as_slice())), 4)?;
    Ok(EvalReport {
        m_eta,
        bleu,
        n_instances: benchmark.len(),
        n_entity_instances: per_instance.iter().filter(|p| p.q.is_some()).count(),
        hits: None,
        per_instance,
    })
}
