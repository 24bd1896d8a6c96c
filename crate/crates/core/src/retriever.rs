//! Dense entity retrieval: cosine relevance, exact top-k over an entity
//! index, the contrastive objective with homonym hard negatives, training,
//! and hits@k evaluation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncodeCache, EncoderConfig, EncoderError, EncoderParams, Vector};
use crate::kg::{entity_text, homonyms_of, Entity, KgError, KnowledgeGraph, LanguageCode};
use crate::nn::Params;
use crate::optim::{AdamW, AdamWConfig};
use crate::records::RetrieverExample;
use crate::tensor::{dot, Mat};
use crate::vocab::{TokenSequence, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrieverError {
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("entity index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("knowledge graph has no entity other than {0:?} to use as a negative")]
    NoNegativeAvailable(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("no hits@k cutoffs requested")]
    NoCutoffs,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Kg(#[from] KgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub temperature: f64,
    pub k_retrieve: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Entities scoring below this are never returned. Disabled by default.
    pub min_score: Option<f64>,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 32,
            epochs: 5,
            negatives: 8,
            temperature: 0.05,
            k_retrieve: 3,
            seed: 42,
            weight_decay: 0.01,
            min_score: None,
        }
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn relevance(q: &Vector, e: &Vector) -> Result<f64, RetrieverError> {
    if q.dim() != e.dim() {
        return Err(RetrieverError::DimensionMismatch(q.dim(), e.dim()));
    }
    let (nq, ne) = (q.norm(), e.norm());
    if nq == 0.0 || ne == 0.0 {
        return Err(RetrieverError::ZeroNorm);
    }
    Ok((q.dot(e) / (nq * ne)).clamp(-1.0, 1.0))
}

/// Encoder weights together with the vocabulary they were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Retriever {
    pub params: EncoderParams,
    pub vocab: Vocabulary,
}

impl Retriever {
    /// Fresh encoder; `config.vocab_size` is overwritten from `vocab`.
    pub fn init(vocab: Vocabulary, mut config: EncoderConfig, seed: u64) -> Self {
        config.vocab_size = vocab.len();
        Self { params: EncoderParams::init(config, seed), vocab }
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.vocab.tokenize(text, self.params.config.max_len)
    }

    pub fn embed(&self, text: &str) -> Result<Vector, EncoderError> {
        self.params.encode(&self.tokenize(text))
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }
}

/// Unit-norm vectors for every entity named in one language, in ascending
/// id order.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityIndex {
    pub lang: LanguageCode,
    pub params_hash: u64,
    pub ids: Vec<String>,
    /// `len × dim`
    pub vectors: Mat,
}

impl EntityIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn vector(&self, i: usize) -> Vector {
        Vector(self.vectors.row(i).to_vec())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|probe| probe.as_str().cmp(id)).ok()
    }

    pub fn vector_of(&self, id: &str) -> Option<Vector> {
        self.position(id).map(|i| self.vector(i))
    }
}

/// Encodes `entity_text(e, lang)` for every entity with a name in `lang`.
/// Returns the index and the number of entities excluded for lacking one.
pub fn build_index(kg: &KnowledgeGraph, retriever: &Retriever, lang: &LanguageCode) -> Result<(EntityIndex, usize), RetrieverError> {
    let d = retriever.dim();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut excluded = 0;
    for e in kg.entities() {
        if !e.has_language(lang) {
            excluded += 1;
            continue;
        }
        let v = retriever.embed(&entity_text(e, lang)?)?;
        ids.push(e.id.clone());
        data.extend_from_slice(&v.0);
    }
    let vectors = Mat::from_vec(ids.len(), d, data);
    let index = EntityIndex { lang: lang.clone(), params_hash: retriever.params.fingerprint(), ids, vectors };
    Ok((index, excluded))
}

/// `true` when `(sa, ia)` ranks strictly before `(sb, ib)`: higher score
/// first, then lower index (= ascending id).
#[inline]
fn ranks_before(sa: f64, ia: usize, sb: f64, ib: usize) -> bool {
    sa > sb || (sa == sb && ia < ib)
}

/// Top-`k` rows of `index` by dot product with the unit-norm `query`
/// (equal to cosine relevance for unit-norm vectors).
pub fn retrieve_vector(index: &EntityIndex, query: &Vector, k: usize, min_score: Option<f64>) -> Result<Vec<(usize, f64)>, RetrieverError> {
    if k == 0 {
        return Err(RetrieverError::InvalidK);
    }
    if index.is_empty() {
        return Err(RetrieverError::EmptyIndex);
    }
    if query.dim() != index.dim() {
        return Err(RetrieverError::DimensionMismatch(query.dim(), index.dim()));
    }
    let k = k.min(index.len());
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for i in 0..index.len() {
        let s = dot(&query.0, index.vectors.row(i));
        if min_score.is_some_and(|m| s < m) {
            continue;
        }
        if best.len() == k {
            let (wi, ws) = best[k - 1];
            if !ranks_before(s, i, ws, wi) {
                continue;
            }
            best.pop();
        }
        let pos = best.iter().position(|&(bi, bs)| ranks_before(s, i, bs, bi)).unwrap_or(best.len());
        best.insert(pos, (i, s));
    }
    Ok(best)
}

/// The `k` most relevant entities for `query`, as `(id, score)` in
/// descending score order, ties broken by ascending id.
pub fn retrieve(index: &EntityIndex, retriever: &Retriever, query: &str, k: usize) -> Result<Vec<(String, f64)>, RetrieverError> {
    let q = retriever.embed(query)?;
    Ok(retrieve_vector(index, &q, k, None)?.into_iter().map(|(i, s)| (index.ids[i].clone(), s)).collect())
}

/// Softmax cross-entropy of the positive against the negatives with
/// temperature `tau`, plus gradients with respect to every input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub d_query: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

pub fn contrastive_loss_grad(q: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64) -> Result<ContrastiveOutput, RetrieverError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(RetrieverError::BadTemperature(tau));
    }
    let d = q.len();
    for v in core::iter::once(&pos).chain(negs.iter()) {
        if v.len() != d {
            return Err(RetrieverError::DimensionMismatch(d, v.len()));
        }
    }
    if negs.is_empty() {
        log::warn!("contrastive loss with no negatives is defined as 0");
        return Ok(ContrastiveOutput { loss: 0.0, d_query: alloc::vec![0.0; d], d_positive: alloc::vec![0.0; d], d_negatives: Vec::new() });
    }
    let mut scores = Vec::with_capacity(negs.len() + 1);
    scores.push(dot(q, pos) / tau);
    scores.extend(negs.iter().map(|n| dot(q, n) / tau));
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| libm::exp(s - max)).collect();
    let sum: f64 = exps.iter().sum();
    let loss = (max + libm::log(sum) - scores[0]).max(0.0);
    // dL/ds_j = p_j - [j == 0]
    let ds: Vec<f64> = exps.iter().enumerate().map(|(j, e)| e / sum - if j == 0 { 1.0 } else { 0.0 }).collect();
    let mut d_query = alloc::vec![0.0; d];
    crate::tensor::axpy(&mut d_query, ds[0] / tau, pos);
    for (n, g) in negs.iter().zip(&ds[1..]) {
        crate::tensor::axpy(&mut d_query, g / tau, n);
    }
    let d_positive = q.iter().map(|v| v * ds[0] / tau).collect();
    let d_negatives = ds[1..].iter().map(|g| q.iter().map(|v| v * g / tau).collect()).collect();
    Ok(ContrastiveOutput { loss, d_query, d_positive, d_negatives })
}

/// `-log(exp(q·pos/τ) / (exp(q·pos/τ) + Σ exp(q·negᵢ/τ)))`.
pub fn contrastive_loss(q: &Vector, pos: &Vector, negs: &[Vector], tau: f64) -> Result<f64, RetrieverError> {
    let negs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
    Ok(contrastive_loss_grad(&q.0, &pos.0, &negs, tau)?.loss)
}

/// Samples negatives from a fixed entity list.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    ids: Vec<String>,
}

impl NegativeSampler {
    pub fn new(ids: Vec<String>) -> Self {
        Self { ids }
    }

    pub fn from_kg(kg: &KnowledgeGraph) -> Self {
        Self::new(kg.entities().map(|e| e.id.clone()).collect())
    }

    /// `n` uniformly drawn entities other than `positive` and `exclude`;
    /// distinct whenever enough candidates exist.
    pub fn random<R: Rng>(&self, positive: &str, exclude: &[String], n: usize, rng: &mut R) -> Result<Vec<String>, RetrieverError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if self.ids.iter().all(|id| id == positive) {
            return Err(RetrieverError::NoNegativeAvailable(positive.into()));
        }
        let candidates = self.ids.iter().filter(|id| *id != positive && !exclude.contains(id)).count();
        let mut out: Vec<String> = Vec::with_capacity(n);
        while out.len() < n {
            let id = &self.ids[rng.random_range(0..self.ids.len())];
            if id == positive {
                continue;
            }
            // Repeats are allowed only once every distinct candidate is used.
            let fresh = !exclude.contains(id) && !out.contains(id);
            if fresh || out.len() >= candidates {
                out.push(id.clone());
            }
        }
        Ok(out)
    }

    /// Up to `n` shuffled homonyms of `positive`, padded with random
    /// entities to exactly `n`.
    pub fn mine_hard<R: Rng>(&self, kg: &KnowledgeGraph, positive: &Entity, n: usize, lang: &LanguageCode, rng: &mut R) -> Result<Vec<String>, RetrieverError> {
        let mut homonyms: Vec<String> = homonyms_of(kg, positive, lang).into_iter().map(|e| e.id.clone()).collect();
        homonyms.shuffle(rng);
        homonyms.truncate(n);
        if homonyms.len() < n {
            let pad = self.random(&positive.id, &homonyms, n - homonyms.len(), rng)?;
            homonyms.extend(pad);
        }
        Ok(homonyms)
    }
}

pub fn mine_hard_negatives<R: Rng>(kg: &KnowledgeGraph, positive: &Entity, n: usize, lang: &LanguageCode, rng: &mut R) -> Result<Vec<String>, RetrieverError> {
    NegativeSampler::from_kg(kg).mine_hard(kg, positive, n, lang, rng)
}

/// Where training negatives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    /// The negatives stored with each example (mined homonyms).
    Dataset,
    /// Uniformly sampled entities, drawn once per example from the seed.
    Random,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub examples_without_negatives: usize,
}

struct PreparedExample {
    query: TokenSequence,
    positive: usize,
    negatives: Vec<usize>,
}

/// Contrastive training with AdamW. Deterministic for a given seed.
pub fn train_retriever(
    kg: &KnowledgeGraph,
    retriever: &mut Retriever,
    dataset: &[RetrieverExample],
    config: &RetrieverConfig,
    lang: &LanguageCode,
    negatives: NegativeSource,
) -> Result<TrainLog, RetrieverError> {
    if dataset.is_empty() {
        return Err(RetrieverError::EmptyDataset);
    }
    if !(config.temperature > 0.0 && config.temperature.is_finite()) {
        return Err(RetrieverError::BadTemperature(config.temperature));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Random negatives come only from entities the dataset already mentions.
    let mut seen: alloc::collections::BTreeSet<String> = alloc::collections::BTreeSet::new();
    for ex in dataset {
        seen.insert(ex.positive.clone());
        seen.extend(ex.negatives.iter().cloned());
    }
    let sampler = NegativeSampler::new(seen.into_iter().collect());

    // Entity texts are tokenized once and referenced by slot.
    let mut slots: BTreeMap<String, usize> = BTreeMap::new();
    let mut entity_tokens: Vec<TokenSequence> = Vec::new();
    let mut slot_of = |id: &str, retriever: &Retriever| -> Result<usize, RetrieverError> {
        if let Some(&s) = slots.get(id) {
            return Ok(s);
        }
        let e = kg.get(id).ok_or_else(|| KgError::UnknownEntity(id.into()))?;
        entity_tokens.push(retriever.tokenize(&entity_text(e, lang)?));
        slots.insert(id.into(), entity_tokens.len() - 1);
        Ok(entity_tokens.len() - 1)
    };
    let mut prepared = Vec::with_capacity(dataset.len());
    let mut without_negatives = 0;
    for ex in dataset {
        let neg_ids = match negatives {
            NegativeSource::Dataset => ex.negatives.clone(),
            NegativeSource::Random => sampler.random(&ex.positive, &[], config.negatives, &mut rng)?,
        };
        if neg_ids.is_empty() {
            without_negatives += 1;
        }
        let positive = slot_of(&ex.positive, retriever)?;
        let negatives = neg_ids.iter().map(|id| slot_of(id, retriever)).collect::<Result<_, _>>()?;
        prepared.push(PreparedExample { query: retriever.tokenize(&ex.query), positive, negatives });
    }

    let mut opt = AdamW::new(AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() }, &retriever.params);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = TrainLog { examples_without_negatives: without_negatives, ..TrainLog::default() };
    let mut grads = retriever.params.zeros_like();
    let batch_size = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(batch_size).enumerate() {
            grads.tensors_mut().into_iter().for_each(Mat::set_zero);
            let mut batch_loss = 0.0;
            for &ix in batch {
                batch_loss += example_step(&retriever.params, &prepared[ix], &entity_tokens, config.temperature, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(RetrieverError::Diverged { epoch, batch: batch_no });
            }
            grads.scale_all(1.0 / batch.len() as f64);
            opt.step(&mut retriever.params, &grads);
            epoch_loss += batch_loss;
        }
        log.epoch_losses.push(epoch_loss / prepared.len() as f64);
    }
    log.steps = opt.steps_taken();
    Ok(log)
}

fn example_step(params: &EncoderParams, ex: &PreparedExample, entity_tokens: &[TokenSequence], tau: f64, grads: &mut EncoderParams) -> Result<f64, RetrieverError> {
    if ex.negatives.is_empty() {
        return Ok(0.0);
    }
    let (q, qc) = params.forward(&ex.query)?;
    let (p, pc) = params.forward(&entity_tokens[ex.positive])?;
    let negs: Vec<(Vector, EncodeCache)> = ex
        .negatives
        .iter()
        .map(|&s| params.forward(&entity_tokens[s]))
        .collect::<Result<_, _>>()?;
    let neg_slices: Vec<&[f64]> = negs.iter().map(|(v, _)| v.as_slice()).collect();
    let out = contrastive_loss_grad(&q.0, &p.0, &neg_slices, tau)?;
    params.backward(&qc, &out.d_query, grads)?;
    params.backward(&pc, &out.d_positive, grads)?;
    for ((_, c), g) in negs.iter().zip(&out.d_negatives) {
        params.backward(c, g, grads)?;
    }
    Ok(out.loss)
}

/// Fraction of `(query, gold id)` pairs whose gold id is among the top-k,
/// for each requested k.
pub fn eval_hits(index: &EntityIndex, retriever: &Retriever, labeled: &[(String, String)], ks: &[usize]) -> Result<BTreeMap<usize, f64>, RetrieverError> {
    let kmax = *ks.iter().max().ok_or(RetrieverError::NoCutoffs)?;
    if ks.contains(&0) {
        return Err(RetrieverError::InvalidK);
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (query, gold) in labeled {
        let q = retriever.embed(query)?;
        let top = retrieve_vector(index, &q, kmax, None)?;
        if let Some(rank) = top.iter().position(|&(i, _)| index.ids[i] == *gold) {
            for (&k, h) in hits.iter_mut() {
                if rank < k {
                    *h += 1;
                }
            }
        }
    }
    let n = labeled.len().max(1) as f64;
    Ok(hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn v(x: &[f64]) -> Vector {
        Vector(x.to_vec())
    }

    #[test]
    fn relevance_cases() {
        let a = v(&[0.3, -0.2, 0.9]);
        assert!((relevance(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relevance(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((relevance(&v(&[1.0, 0.0]), &v(&[0.6, 0.8])).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(relevance(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(RetrieverError::ZeroNorm));
        assert!(matches!(relevance(&v(&[1.0]), &v(&[1.0, 0.0])), Err(RetrieverError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn loss_closed_forms() {
        let q = v(&[1.0, 0.0]);
        let pos = v(&[1.0, 0.0]);
        let neg = v(&[0.0, 1.0]);
        // mpmath: log(1 + exp(-1))
        let l = contrastive_loss(&q, &pos, &[neg.clone()], 1.0).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
        for tau in [0.05, 0.5, 3.0] {
            let l = contrastive_loss(&q, &neg, &[neg.clone()], tau).unwrap();
            assert!((l - core::f64::consts::LN_2).abs() < 1e-12);
        }
        assert_eq!(contrastive_loss(&q, &pos, &[], 1.0).unwrap(), 0.0);
        assert!(matches!(contrastive_loss(&q, &pos, &[], 0.0), Err(RetrieverError::BadTemperature(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let q = [0.3, -0.5, 0.8];
        let p = [0.1, 0.7, -0.2];
        let n1 = [-0.4, 0.2, 0.6];
        let n2 = [0.9, -0.1, 0.3];
        let tau = 0.3;
        let out = contrastive_loss_grad(&q, &p, &[&n1, &n2], tau).unwrap();
        let f = |q: &[f64]| contrastive_loss_grad(q, &p, &[&n1, &n2], tau).unwrap().loss;
        for i in 0..3 {
            let mut a = q;
            a[i] += 1e-6;
            let mut b = q;
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - out.d_query[i]).abs() < 1e-8);
        }
    }

    fn toy_index(rows: &[[f64; 2]]) -> EntityIndex {
        let ids = (0..rows.len()).map(|i| alloc::format!("E{i}")).collect();
        let data = rows.iter().flatten().copied().collect();
        EntityIndex { lang: LanguageCode::new("en").unwrap(), params_hash: 0, ids, vectors: Mat::from_vec(rows.len(), 2, data) }
    }

    #[test]
    fn top_k_clamps_and_breaks_ties_by_id() {
        let idx = toy_index(&[[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [0.6, 0.8]]);
        let got = retrieve_vector(&idx, &v(&[1.0, 0.0]), 10, None).unwrap();
        assert_eq!(got.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 3, 0]);
        let got = retrieve_vector(&idx, &v(&[1.0, 0.0]), 1, None).unwrap();
        assert_eq!(got, vec![(1, 1.0)]);
        let got = retrieve_vector(&idx, &v(&[1.0, 0.0]), 3, Some(0.7)).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(retrieve_vector(&idx, &v(&[1.0, 0.0]), 0, None), Err(RetrieverError::InvalidK));
        let empty = toy_index(&[]);
        assert_eq!(retrieve_vector(&empty, &v(&[1.0, 0.0]), 1, None), Err(RetrieverError::EmptyIndex));
    }
}
