//! Toy Transformer encoder-decoder with explicit (`[KG]` text suffix) and
//! implicit (entity-embedding prefix) knowledge integration.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Vector;
use crate::kg::{KgError, KnowledgeGraph, LanguageCode};
use crate::nn::{log_softmax, uniform_mat, DecoderBlock, DecoderBlockCache, EncoderBlock, EncoderBlockCache, LayerNorm, LayerNormCache, Params};
use crate::optim::{AdamW, AdamWConfig};
use crate::records::TranslationExample;
use crate::retriever::{retrieve_vector, EntityIndex, Retriever, RetrieverError};
use crate::tensor::{axpy, matmul, matmul_t, matmul_tn_acc, Mat};
use crate::vocab::{TokenSequence, Vocabulary, ARROW_ID, BOS_ID, EOS_ID, KG_ID, SEP_ID};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranslatorError {
    #[error("source needs {len} tokens but the input limit is {max} (dropped pairs: {dropped:?})")]
    SourceTooLong { len: usize, max: usize, dropped: Vec<String> },
    #[error("decoder input of length {len} exceeds maximum {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("embedding has dimension {got}, fusion expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("translation dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("mode {0:?} needs a knowledge context")]
    MissingKnowledge(IntegrationMode),
    #[error("vocabulary has no tag for language {0}")]
    MissingLanguageTag(String),
    #[error("vocabulary has {vocab} tokens but the model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Kg(#[from] KgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationMode {
    None,
    Explicit,
    Implicit,
    Both,
}

impl IntegrationMode {
    pub const ALL: [IntegrationMode; 4] = [Self::None, Self::Explicit, Self::Implicit, Self::Both];

    pub fn uses_text(self) -> bool {
        matches!(self, Self::Explicit | Self::Both)
    }

    pub fn uses_embeddings(self) -> bool {
        matches!(self, Self::Implicit | Self::Both)
    }

    pub fn uses_knowledge(self) -> bool {
        self != Self::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Explicit => "explicit",
            Self::Implicit => "implicit",
            Self::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl core::fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the entity pairs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeSource {
    Retrieved,
    Gold,
}

impl KnowledgeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Retrieved => "retrieved",
            Self::Gold => "gold",
        }
    }
}

/// One injected piece of knowledge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityNamePair {
    pub id: String,
    pub name_src: String,
    pub name_tgt: String,
    /// Retrieval score; absent for gold entities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip)]
    pub embedding: Option<Vector>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_input: usize,
    pub max_output: usize,
    /// Width of the entity embeddings fed through the fusion projection.
    pub retriever_dim: usize,
    pub embed_init: f64,
}

impl Seq2SeqConfig {
    pub fn new(vocab_size: usize, retriever_dim: usize) -> Self {
        Self {
            vocab_size,
            dim: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_input: 512,
            max_output: 512,
            retriever_dim,
            embed_init: 0.1,
        }
    }
}

/// Token embeddings are shared by the encoder input, the decoder input and
/// the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqParams {
    pub config: Seq2SeqConfig,
    /// `vocab × dim`
    pub emb: Mat,
    /// `1 × vocab`
    pub out_bias: Mat,
    /// `max_input × dim`
    pub enc_pos: Mat,
    /// `max_output × dim`
    pub dec_pos: Mat,
    pub enc_blocks: Vec<EncoderBlock>,
    pub enc_ln: LayerNorm,
    pub dec_blocks: Vec<DecoderBlock>,
    pub dec_ln: LayerNorm,
    /// `retriever_dim × dim`, no bias.
    pub fusion: Mat,
}

impl Params for Seq2SeqParams {
    fn tensors(&self) -> Vec<&Mat> {
        let mut t = vec![&self.emb, &self.out_bias, &self.enc_pos, &self.dec_pos];
        t.extend(self.enc_blocks.tensors());
        t.extend(self.enc_ln.tensors());
        t.extend(self.dec_blocks.tensors());
        t.extend(self.dec_ln.tensors());
        t.push(&self.fusion);
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut t = vec![&mut self.emb, &mut self.out_bias, &mut self.enc_pos, &mut self.dec_pos];
        t.extend(self.enc_blocks.tensors_mut());
        t.extend(self.enc_ln.tensors_mut());
        t.extend(self.dec_blocks.tensors_mut());
        t.extend(self.dec_ln.tensors_mut());
        t.push(&mut self.fusion);
        t
    }
}

/// Source ids and knowledge already laid out for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `BOS … EOS`, with the `[KG]` suffix in explicit/both modes.
    pub source: TokenSequence,
    /// Entity embeddings in retrieval-rank order (implicit/both modes).
    pub prefix: Vec<Vector>,
}

/// A teacher-forced training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub input: ModelInput,
    /// `[<lang:tgt>, y₁ … yₘ]`
    pub decoder_input: Vec<u32>,
    /// `[y₁ … yₘ, EOS]`
    pub labels: Vec<u32>,
}

pub struct SourceCache {
    ids: Vec<u32>,
    blocks: Vec<EncoderBlockCache>,
    ln: LayerNormCache,
}

pub struct DecoderCache {
    ids: Vec<u32>,
    blocks: Vec<DecoderBlockCache>,
    ln: LayerNormCache,
    out: Mat,
}

/// Decoding strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "width")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl Seq2SeqParams {
    pub fn init(config: Seq2SeqConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let emb = uniform_mat(&mut rng, config.vocab_size, d, config.embed_init);
        let enc_pos = uniform_mat(&mut rng, config.max_input, d, config.embed_init);
        let dec_pos = uniform_mat(&mut rng, config.max_output, d, config.embed_init);
        let enc_blocks = (0..config.enc_layers).map(|_| EncoderBlock::new(&mut rng, d, config.heads, config.ffn_dim)).collect();
        let dec_blocks = (0..config.dec_layers).map(|_| DecoderBlock::new(&mut rng, d, config.heads, config.ffn_dim)).collect();
        let bound = libm::sqrt(6.0 / (config.retriever_dim + d) as f64);
        let fusion = uniform_mat(&mut rng, config.retriever_dim, d, bound);
        Self {
            config,
            emb,
            out_bias: Mat::zeros(1, config.vocab_size),
            enc_pos,
            dec_pos,
            enc_blocks,
            enc_ln: LayerNorm::new(d),
            dec_blocks,
            dec_ln: LayerNorm::new(d),
            fusion,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), TranslatorError> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(TranslatorError::IdOutOfRange { id, vocab: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn embed(&self, ids: &[u32], pos: &Mat) -> Mat {
        let mut x = Mat::zeros(ids.len(), self.config.dim);
        for (i, &id) in ids.iter().enumerate() {
            let row = x.row_mut(i);
            row.copy_from_slice(self.emb.row(id as usize));
            axpy(row, 1.0, pos.row(i));
        }
        x
    }

    /// Encoder hidden states, one per input position.
    pub fn encode_source(&self, toks: &TokenSequence) -> Result<(Mat, SourceCache), TranslatorError> {
        let ids = toks.ids();
        if ids.is_empty() {
            return Err(TranslatorError::EmptyInput);
        }
        if ids.len() > self.config.max_input {
            return Err(TranslatorError::SourceTooLong { len: ids.len(), max: self.config.max_input, dropped: Vec::new() });
        }
        self.check_ids(ids)?;
        let mut x = self.embed(ids, &self.enc_pos);
        let mut blocks = Vec::with_capacity(self.enc_blocks.len());
        for b in &self.enc_blocks {
            let (y, c) = b.forward(&x, None);
            blocks.push(c);
            x = y;
        }
        let (h, ln) = self.enc_ln.forward(&x);
        Ok((h, SourceCache { ids: ids.to_vec(), blocks, ln }))
    }

    /// Encoder states with the projected entity embeddings prepended.
    pub fn memory(&self, input: &ModelInput) -> Result<Mat, TranslatorError> {
        let (h, _) = self.encode_source(&input.source)?;
        fuse(&input.prefix, &h, &self.fusion)
    }

    fn decoder_forward(&self, memory: &Mat, ids: &[u32]) -> Result<(Mat, DecoderCache), TranslatorError> {
        if ids.len() > self.config.max_output {
            return Err(TranslatorError::TargetTooLong { len: ids.len(), max: self.config.max_output });
        }
        self.check_ids(ids)?;
        let mut x = self.embed(ids, &self.dec_pos);
        let mut blocks = Vec::with_capacity(self.dec_blocks.len());
        for b in &self.dec_blocks {
            let (y, c) = b.forward(&x, memory, None);
            blocks.push(c);
            x = y;
        }
        let (out, ln) = self.dec_ln.forward(&x);
        let logits = self.project(&out);
        Ok((logits, DecoderCache { ids: ids.to_vec(), blocks, ln, out }))
    }

    fn project(&self, states: &Mat) -> Mat {
        let mut logits = matmul_t(states, &self.emb);
        for r in 0..logits.rows {
            axpy(logits.row_mut(r), 1.0, &self.out_bias.data);
        }
        logits
    }

    fn decoder_states(&self, memory: &Mat, ids: &[u32]) -> Result<Mat, TranslatorError> {
        if ids.len() > self.config.max_output {
            return Err(TranslatorError::TargetTooLong { len: ids.len(), max: self.config.max_output });
        }
        self.check_ids(ids)?;
        let mut x = self.embed(ids, &self.dec_pos);
        for b in &self.dec_blocks {
            x = b.forward(&x, memory, None).0;
        }
        Ok(self.dec_ln.forward(&x).0)
    }

    /// Next-token logits at every decoder position.
    pub fn decoder_logits(&self, memory: &Mat, decoder_input: &[u32]) -> Result<Mat, TranslatorError> {
        Ok(self.decoder_forward(memory, decoder_input)?.0)
    }

    /// Mean token cross-entropy of `labels` under teacher forcing.
    pub fn loss(&self, inst: &TrainingInstance) -> Result<f64, TranslatorError> {
        let memory = self.memory(&inst.input)?;
        let (logits, _) = self.decoder_forward(&memory, &inst.decoder_input)?;
        Ok(cross_entropy(&logits, &inst.labels).0)
    }

    /// Loss of one instance; its gradient is accumulated into `grads`.
    pub fn loss_and_grad(&self, inst: &TrainingInstance, grads: &mut Seq2SeqParams) -> Result<f64, TranslatorError> {
        let (h, scache) = self.encode_source(&inst.input.source)?;
        let memory = fuse(&inst.input.prefix, &h, &self.fusion)?;
        let (logits, dcache) = self.decoder_forward(&memory, &inst.decoder_input)?;
        let (loss, dlogits) = cross_entropy(&logits, &inst.labels);

        // Output projection is tied to the token embeddings.
        for r in 0..dlogits.rows {
            axpy(&mut grads.out_bias.data, 1.0, dlogits.row(r));
        }
        matmul_tn_acc(&dlogits, &dcache.out, &mut grads.emb);
        let dout = matmul(&dlogits, &self.emb);
        let mut dx = self.dec_ln.backward(&dout, &dcache.ln, &mut grads.dec_ln);
        let mut dmem = Mat::zeros(memory.rows, memory.cols);
        for ((b, c), g) in self.dec_blocks.iter().zip(&dcache.blocks).zip(grads.dec_blocks.iter_mut()).rev() {
            let (dxi, dm) = b.backward(&dx, &memory, c, g);
            dmem.add_assign(&dm);
            dx = dxi;
        }
        for (i, &id) in dcache.ids.iter().enumerate() {
            axpy(grads.emb.row_mut(id as usize), 1.0, dx.row(i));
            axpy(grads.dec_pos.row_mut(i), 1.0, dx.row(i));
        }

        let k = inst.input.prefix.len();
        for (i, e) in inst.input.prefix.iter().enumerate() {
            // prefix_i = e_i · P  =>  dP += e_iᵀ · dprefix_i
            for (r, &ev) in e.0.iter().enumerate() {
                if ev != 0.0 {
                    axpy(grads.fusion.row_mut(r), ev, dmem.row(i));
                }
            }
        }
        let dh = dmem.slice_rows(k, dmem.rows);
        let mut dx = self.enc_ln.backward(&dh, &scache.ln, &mut grads.enc_ln);
        for ((b, c), g) in self.enc_blocks.iter().zip(&scache.blocks).zip(grads.enc_blocks.iter_mut()).rev() {
            dx = b.backward(&dx, c, g);
        }
        for (i, &id) in scache.ids.iter().enumerate() {
            axpy(grads.emb.row_mut(id as usize), 1.0, dx.row(i));
            axpy(grads.enc_pos.row_mut(i), 1.0, dx.row(i));
        }
        Ok(loss)
    }

    /// Autoregressive generation after `start` (the target-language tag).
    /// The result ends with EOS unless `max_len` tokens were produced first.
    pub fn decode(&self, memory: &Mat, start: u32, strategy: Strategy, max_len: usize) -> Result<TokenSequence, TranslatorError> {
        let max_len = max_len.min(self.config.max_output - 1);
        match strategy {
            Strategy::Greedy => self.greedy(memory, start, max_len),
            Strategy::Beam(0) => Err(TranslatorError::ZeroBeam),
            Strategy::Beam(w) => self.beam(memory, start, w, max_len),
        }
    }

    fn next_log_probs(&self, memory: &Mat, prefix: &[u32]) -> Result<Vec<f64>, TranslatorError> {
        let states = self.decoder_states(memory, prefix)?;
        let last = states.slice_rows(states.rows - 1, states.rows);
        Ok(log_softmax(self.project(&last).row(0)))
    }

    fn greedy(&self, memory: &Mat, start: u32, max_len: usize) -> Result<TokenSequence, TranslatorError> {
        let mut seq = vec![start];
        while seq.len() <= max_len {
            let lp = self.next_log_probs(memory, &seq)?;
            let best = argmax(&lp);
            seq.push(best);
            if best == EOS_ID {
                break;
            }
        }
        seq.remove(0);
        Ok(TokenSequence(seq))
    }

    fn beam(&self, memory: &Mat, start: u32, width: usize, max_len: usize) -> Result<TokenSequence, TranslatorError> {
        // (tokens after `start`, cumulative log-probability)
        let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        for _ in 0..max_len {
            let mut cands: Vec<(f64, u32, usize)> = Vec::new();
            for (hi, (toks, score)) in alive.iter().enumerate() {
                let mut prefix = vec![start];
                prefix.extend_from_slice(toks);
                let lp = self.next_log_probs(memory, &prefix)?;
                cands.extend(lp.iter().enumerate().map(|(t, l)| (score + l, t as u32, hi)));
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(width);
            let mut next = Vec::with_capacity(width);
            for (score, tok, hi) in cands {
                let mut toks = alive[hi].0.clone();
                toks.push(tok);
                if tok == EOS_ID {
                    finished.push((toks, score));
                } else {
                    next.push((toks, score));
                }
            }
            alive = next;
            let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
            // Scores only decrease as hypotheses grow.
            if alive.iter().all(|a| a.1 <= best_finished) {
                break;
            }
        }
        finished.extend(alive);
        finished.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(TokenSequence(finished.swap_remove(0).0))
    }
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Mean negative log-likelihood of `labels` and its gradient w.r.t. the
/// logits.
fn cross_entropy(logits: &Mat, labels: &[u32]) -> (f64, Mat) {
    let n = labels.len().max(1) as f64;
    let mut d = Mat::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let lp = log_softmax(logits.row(r));
        loss -= lp[y as usize];
        let row = d.row_mut(r);
        for (g, l) in row.iter_mut().zip(&lp) {
            *g = libm::exp(*l) / n;
        }
        row[y as usize] -= 1.0 / n;
    }
    (loss / n, d)
}

/// Prepends `embeddings · P` (in the given order) to `h`. The rows of `h`
/// are copied unchanged.
pub fn fuse(embeddings: &[Vector], h: &Mat, p: &Mat) -> Result<Mat, TranslatorError> {
    if embeddings.is_empty() {
        return Ok(h.clone());
    }
    if p.cols != h.cols {
        return Err(TranslatorError::DimensionMismatch { expected: h.cols, got: p.cols });
    }
    let mut e = Mat::zeros(embeddings.len(), p.rows);
    for (i, v) in embeddings.iter().enumerate() {
        if v.dim() != p.rows {
            return Err(TranslatorError::DimensionMismatch { expected: p.rows, got: v.dim() });
        }
        e.row_mut(i).copy_from_slice(&v.0);
    }
    Ok(Mat::vstack(&matmul(&e, p), h))
}

/// Token layout of the explicit-knowledge input:
/// `BOS source [KG] ns₁ → nt₁ ; ns₂ → nt₂ … EOS`.
///
/// Whole pairs are dropped from the end of the (rank-ordered) list until
/// the sequence fits in `max_len`; the ids of dropped pairs are returned.
/// The source itself is never truncated.
pub fn build_kg_input(source: &[u32], pairs: &[EntityNamePair], vocab: &Vocabulary, max_len: usize) -> Result<(TokenSequence, Vec<String>), TranslatorError> {
    let base = source.len() + 3;
    let mut dropped: Vec<String> = Vec::new();
    let encoded: Vec<Vec<u32>> = pairs
        .iter()
        .map(|p| {
            let mut t = vocab.ids_of(&p.name_src);
            t.push(ARROW_ID);
            t.extend(vocab.ids_of(&p.name_tgt));
            t
        })
        .collect();
    let mut keep = encoded.len();
    let len_with = |n: usize| base + encoded[..n].iter().map(Vec::len).sum::<usize>() + n.saturating_sub(1);
    while keep > 0 && len_with(keep) > max_len {
        keep -= 1;
        dropped.push(pairs[keep].id.clone());
    }
    dropped.reverse();
    if base > max_len {
        return Err(TranslatorError::SourceTooLong { len: base, max: max_len, dropped });
    }
    if !dropped.is_empty() {
        log::warn!("dropped {} knowledge pair(s) to fit the input limit: {:?}", dropped.len(), dropped);
    }
    let mut ids = Vec::with_capacity(len_with(keep));
    ids.push(BOS_ID);
    ids.extend_from_slice(source);
    ids.push(KG_ID);
    for (i, t) in encoded[..keep].iter().enumerate() {
        if i > 0 {
            ids.push(SEP_ID);
        }
        ids.extend_from_slice(t);
    }
    ids.push(EOS_ID);
    Ok((TokenSequence(ids), dropped))
}

/// Human-readable form of [`build_kg_input`]'s layout.
pub fn format_kg_input(source: &str, pairs: &[EntityNamePair]) -> String {
    let mut s = String::from(source.trim());
    s.push_str(" [KG]");
    for (i, p) in pairs.iter().enumerate() {
        if i > 0 {
            s.push_str(" ;");
        }
        s.push(' ');
        s.push_str(&p.name_src);
        s.push_str(" → ");
        s.push_str(&p.name_tgt);
    }
    s
}

/// Everything needed to turn a source text into model input.
#[derive(Clone, Copy)]
pub struct KnowledgeContext<'a> {
    pub kg: &'a KnowledgeGraph,
    pub retriever: &'a Retriever,
    pub index: &'a EntityIndex,
    pub src: &'a LanguageCode,
    pub tgt: &'a LanguageCode,
}

impl KnowledgeContext<'_> {
    fn pair(&self, id: &str, score: Option<f64>) -> Result<Option<EntityNamePair>, TranslatorError> {
        let e = self.kg.get(id).ok_or_else(|| KgError::UnknownEntity(id.into()))?;
        let (Some(ns), Some(nt)) = (e.primary_name(self.src), e.primary_name(self.tgt)) else {
            log::warn!("entity {id} lacks a {} or {} name; pair skipped", self.src, self.tgt);
            return Ok(None);
        };
        Ok(Some(EntityNamePair {
            id: id.into(),
            name_src: ns.into(),
            name_tgt: nt.into(),
            score,
            embedding: self.index.vector_of(id),
        }))
    }

    /// Top-`k` retrieved entities for `text`, as name pairs.
    pub fn retrieved_pairs(&self, text: &str, k: usize, min_score: Option<f64>) -> Result<Vec<EntityNamePair>, TranslatorError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = self.retriever.embed(text).map_err(RetrieverError::from)?;
        let mut out = Vec::new();
        for (i, s) in retrieve_vector(self.index, &q, k, min_score)? {
            out.extend(self.pair(&self.index.ids[i], Some(s))?);
        }
        Ok(out)
    }

    /// Gold entities as name pairs, in the given order.
    pub fn gold_pairs(&self, ids: &[String]) -> Result<Vec<EntityNamePair>, TranslatorError> {
        let mut out = Vec::new();
        for id in ids {
            out.extend(self.pair(id, None)?);
        }
        Ok(out)
    }

    pub fn pairs(&self, source: KnowledgeSource, text: &str, gold: &[String], k: usize) -> Result<Vec<EntityNamePair>, TranslatorError> {
        match source {
            KnowledgeSource::Retrieved => self.retrieved_pairs(text, k, None),
            KnowledgeSource::Gold => self.gold_pairs(gold),
        }
    }
}

/// Lays out `text` and `pairs` for `mode`. Pairs dropped for length are
/// removed from `pairs`.
pub fn prepare_input(vocab: &Vocabulary, text: &str, pairs: &mut Vec<EntityNamePair>, mode: IntegrationMode, max_input: usize) -> Result<ModelInput, TranslatorError> {
    let src = vocab.ids_of(text);
    let source = if mode.uses_text() {
        let (toks, dropped) = build_kg_input(&src, pairs, vocab, max_input)?;
        pairs.retain(|p| !dropped.contains(&p.id));
        toks
    } else {
        if src.len() + 2 > max_input {
            return Err(TranslatorError::SourceTooLong { len: src.len() + 2, max: max_input, dropped: Vec::new() });
        }
        let mut ids = vec![BOS_ID];
        ids.extend(src);
        ids.push(EOS_ID);
        TokenSequence(ids)
    };
    if !mode.uses_knowledge() {
        pairs.clear();
    }
    let prefix = if mode.uses_embeddings() { pairs.iter().filter_map(|p| p.embedding.clone()).collect() } else { Vec::new() };
    Ok(ModelInput { source, prefix })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub k_retrieve: usize,
    /// Share of examples trained with their gold entities when training on
    /// retrieved knowledge, so one model serves both knowledge sources.
    pub gold_fraction: f64,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self { lr: 1e-5, batch_size: 32, epochs: 5, seed: 42, weight_decay: 0.01, k_retrieve: 3, gold_fraction: 0.0 }
    }
}

impl TranslatorConfig {
    /// Seed of the gold/retrieved draw, kept apart from the shuffle stream.
    pub fn mix_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TranslatorLog {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub skipped_pairs: usize,
    /// Examples per number of injected pairs.
    pub pair_histogram: BTreeMap<usize, usize>,
}

/// Converts a parallel example into a teacher-forced instance.
pub fn prepare_example(
    vocab: &Vocabulary,
    config: &Seq2SeqConfig,
    ex: &TranslationExample,
    tgt: &LanguageCode,
    mut pairs: Vec<EntityNamePair>,
    mode: IntegrationMode,
) -> Result<(TrainingInstance, usize), TranslatorError> {
    let input = prepare_input(vocab, &ex.source, &mut pairs, mode, config.max_input)?;
    let lang = vocab.lang_id(tgt).ok_or_else(|| TranslatorError::MissingLanguageTag(tgt.to_string()))?;
    let mut y = vocab.ids_of(&ex.target);
    y.truncate(config.max_output - 1);
    let mut decoder_input = vec![lang];
    decoder_input.extend_from_slice(&y);
    y.push(EOS_ID);
    Ok((TrainingInstance { input, decoder_input, labels: y }, pairs.len()))
}

/// Knowledge pairs for every example: retrieved for the source text, or
/// the example's gold entities.
pub fn knowledge_pairs(
    dataset: &[TranslationExample],
    knowledge: &KnowledgeContext<'_>,
    source: KnowledgeSource,
    k: usize,
) -> Result<Vec<Vec<EntityNamePair>>, TranslatorError> {
    dataset.iter().map(|ex| knowledge.pairs(source, &ex.source, &ex.gold_entities, k)).collect()
}

/// Retrieved pairs for every example, except for a `gold_fraction` share
/// (drawn with `seed`) that gets its gold entities instead.
pub fn mixed_knowledge_pairs(
    dataset: &[TranslationExample],
    knowledge: &KnowledgeContext<'_>,
    k: usize,
    gold_fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<EntityNamePair>>, TranslatorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dataset
        .iter()
        .map(|ex| {
            let source = if rng.random::<f64>() < gold_fraction { KnowledgeSource::Gold } else { KnowledgeSource::Retrieved };
            knowledge.pairs(source, &ex.source, &ex.gold_entities, k)
        })
        .collect()
}

/// Teacher-forced cross-entropy training with AdamW. `knowledge` may be
/// `None` only in mode `none`, which never consults it.
#[allow(clippy::too_many_arguments)]
pub fn train_translator(
    params: &mut Seq2SeqParams,
    vocab: &Vocabulary,
    dataset: &[TranslationExample],
    knowledge: Option<&KnowledgeContext<'_>>,
    source: KnowledgeSource,
    mode: IntegrationMode,
    tgt: &LanguageCode,
    config: &TranslatorConfig,
) -> Result<TranslatorLog, TranslatorError> {
    let pairs = match (mode.uses_knowledge(), knowledge) {
        (false, _) => vec![Vec::new(); dataset.len()],
        (true, None) => return Err(TranslatorError::MissingKnowledge(mode)),
        (true, Some(k)) if source == KnowledgeSource::Retrieved => {
            mixed_knowledge_pairs(dataset, k, config.k_retrieve, config.gold_fraction, config.mix_seed())?
        }
        (true, Some(k)) => knowledge_pairs(dataset, k, source, config.k_retrieve)?,
    };
    let mut log = train_translator_on_pairs(params, vocab, dataset, &pairs, mode, tgt, config)?;
    if mode.uses_knowledge() && source == KnowledgeSource::Gold {
        log.skipped_pairs = dataset.iter().zip(&pairs).map(|(ex, p)| ex.gold_entities.len() - p.len()).sum();
    }
    Ok(log)
}

/// As [`train_translator`], with the knowledge for each example supplied.
pub fn train_translator_on_pairs(
    params: &mut Seq2SeqParams,
    vocab: &Vocabulary,
    dataset: &[TranslationExample],
    pairs: &[Vec<EntityNamePair>],
    mode: IntegrationMode,
    tgt: &LanguageCode,
    config: &TranslatorConfig,
) -> Result<TranslatorLog, TranslatorError> {
    if dataset.is_empty() {
        return Err(TranslatorError::EmptyDataset);
    }
    if vocab.len() != params.config.vocab_size {
        return Err(TranslatorError::VocabMismatch { vocab: vocab.len(), model: params.config.vocab_size });
    }
    assert_eq!(dataset.len(), pairs.len(), "one pair list per example");
    let mut log = TranslatorLog::default();
    let mut instances = Vec::with_capacity(dataset.len());
    for (ex, p) in dataset.iter().zip(pairs) {
        let p = if mode.uses_knowledge() { p.clone() } else { Vec::new() };
        let (inst, used) = prepare_example(vocab, &params.config, ex, tgt, p, mode)?;
        *log.pair_histogram.entry(used).or_default() += 1;
        instances.push(inst);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() }, params);
    let mut grads = params.zeros_like();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            grads.tensors_mut().into_iter().for_each(Mat::set_zero);
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += params.loss_and_grad(&instances[i], &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(TranslatorError::Diverged { epoch, batch: batch_no });
            }
            grads.scale_all(1.0 / batch.len() as f64);
            opt.step(params, &grads);
            total += batch_loss;
        }
        let mean = total / instances.len() as f64;
        log::info!("translator epoch {} mean loss {:.4}", epoch + 1, mean);
        log.epoch_losses.push(mean);
    }
    log.steps = opt.steps_taken();
    Ok(log)
}

/// Output of one end-to-end translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub text: String,
    pub tokens: TokenSequence,
    pub pairs: Vec<EntityNamePair>,
}

/// Translates `text` given already-selected knowledge `pairs`.
#[allow(clippy::too_many_arguments)]
pub fn translate_with_pairs(
    params: &Seq2SeqParams,
    vocab: &Vocabulary,
    text: &str,
    mut pairs: Vec<EntityNamePair>,
    mode: IntegrationMode,
    tgt: &LanguageCode,
    strategy: Strategy,
    max_len: usize,
) -> Result<Translation, TranslatorError> {
    let input = prepare_input(vocab, text, &mut pairs, mode, params.config.max_input)?;
    let memory = params.memory(&input)?;
    let lang = vocab.lang_id(tgt).ok_or_else(|| TranslatorError::MissingLanguageTag(tgt.to_string()))?;
    let tokens = params.decode(&memory, lang, strategy, max_len)?;
    Ok(Translation { text: vocab.detokenize(tokens.ids()), tokens, pairs })
}

/// Retrieve (or look up gold entities), lay out the input for `mode`,
/// encode, fuse and decode.
#[allow(clippy::too_many_arguments)]
pub fn translate(
    params: &Seq2SeqParams,
    vocab: &Vocabulary,
    knowledge: Option<&KnowledgeContext<'_>>,
    text: &str,
    gold: &[String],
    source: KnowledgeSource,
    mode: IntegrationMode,
    tgt: &LanguageCode,
    k: usize,
    strategy: Strategy,
    max_len: usize,
) -> Result<Translation, TranslatorError> {
    let pairs = match (mode.uses_knowledge(), knowledge) {
        (false, _) => Vec::new(),
        (true, None) => return Err(TranslatorError::MissingKnowledge(mode)),
        (true, Some(ctx)) => ctx.pairs(source, text, gold, k)?,
    };
    translate_with_pairs(params, vocab, text, pairs, mode, tgt, strategy, max_len)
}
