//! Small transformer text encoder producing unit-norm vectors, with exact
//! reverse-mode gradients.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{uniform_mat, EncoderBlock, EncoderBlockCache, Params};
use crate::tensor::{axpy, dot, Mat};
use crate::vocab::{TokenSequence, EOS_ID, PAD_ID};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncoderError {
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("sequence has no non-padding token")]
    Empty,
    #[error("upstream vector has dimension {got}, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Half-width of the uniform initializer for token and position
    /// embeddings.
    pub embed_init: f64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, dim: 64, layers: 2, heads: 4, ffn_dim: 128, max_len: 128, embed_init: 0.1 }
    }
}

/// Dense embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `vocab × dim`
    pub tok_emb: Mat,
    /// `max_len × dim`
    pub pos_emb: Mat,
    pub blocks: Vec<EncoderBlock>,
}

impl Params for EncoderParams {
    fn tensors(&self) -> Vec<&Mat> {
        let mut t = vec![&self.tok_emb, &self.pos_emb];
        t.extend(self.blocks.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut t = vec![&mut self.tok_emb, &mut self.pos_emb];
        t.extend(self.blocks.tensors_mut());
        t
    }
}

/// Everything the reverse pass of one `encode` call needs.
#[derive(Clone, Debug)]
pub struct EncodeCache {
    ids: Vec<u32>,
    valid: Vec<bool>,
    blocks: Vec<EncoderBlockCache>,
    pooled: Vec<f64>,
    norm: f64,
}

/// Mean over `valid` rows followed by L2 normalization. Returns the vector
/// and the pre-normalization norm.
pub fn pool_and_normalize(states: &Mat, valid: &[bool]) -> (Vector, Vec<f64>, f64) {
    let mut pooled = vec![0.0; states.cols];
    let mut count = 0usize;
    for (i, &ok) in valid.iter().enumerate() {
        if ok {
            axpy(&mut pooled, 1.0, states.row(i));
            count += 1;
        }
    }
    let inv = 1.0 / count.max(1) as f64;
    pooled.iter_mut().for_each(|v| *v *= inv);
    let norm = libm::sqrt(dot(&pooled, &pooled));
    let out = pooled.iter().map(|v| v / norm).collect();
    (Vector(out), pooled, norm)
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok_emb = uniform_mat(&mut rng, config.vocab_size, config.dim, config.embed_init);
        let pos_emb = uniform_mat(&mut rng, config.max_len, config.dim, config.embed_init);
        let blocks = (0..config.layers)
            .map(|_| EncoderBlock::new(&mut rng, config.dim, config.heads, config.ffn_dim))
            .collect();
        Self { config, tok_emb, pos_emb, blocks }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Positions up to and including the first EOS take part; anything
    /// after it is padding. PAD ids before it are masked.
    fn prepare(&self, toks: &TokenSequence) -> Result<(Vec<u32>, Vec<bool>), EncoderError> {
        let ids = toks.ids();
        let end = ids.iter().position(|&t| t == EOS_ID).map_or(ids.len(), |p| p + 1);
        let ids = &ids[..end];
        if ids.len() > self.config.max_len {
            return Err(EncoderError::TooLong { len: ids.len(), max: self.config.max_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(EncoderError::IdOutOfRange { id, vocab: self.config.vocab_size });
        }
        let valid: Vec<bool> = ids.iter().map(|&t| t != PAD_ID).collect();
        if !valid.iter().any(|&v| v) {
            return Err(EncoderError::Empty);
        }
        Ok((ids.to_vec(), valid))
    }

    pub fn forward(&self, toks: &TokenSequence) -> Result<(Vector, EncodeCache), EncoderError> {
        let (ids, valid) = self.prepare(toks)?;
        let d = self.config.dim;
        let mut x = Mat::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            let row = x.row_mut(i);
            row.copy_from_slice(self.tok_emb.row(id as usize));
            axpy(row, 1.0, self.pos_emb.row(i));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, Some(&valid));
            caches.push(c);
            x = y;
        }
        let (v, pooled, norm) = pool_and_normalize(&x, &valid);
        Ok((v, EncodeCache { ids, valid, blocks: caches, pooled, norm }))
    }

    pub fn encode(&self, toks: &TokenSequence) -> Result<Vector, EncoderError> {
        self.forward(toks).map(|(v, _)| v)
    }

    /// Accumulates the gradient of `upstream · encode(toks)` into `grads`.
    pub fn backward(&self, cache: &EncodeCache, upstream: &[f64], grads: &mut EncoderParams) -> Result<(), EncoderError> {
        let d = self.config.dim;
        if upstream.len() != d {
            return Err(EncoderError::ShapeMismatch { expected: d, got: upstream.len() });
        }
        // v = p / |p|  =>  dp = (u - v (v·u)) / |p|
        let inv = 1.0 / cache.norm;
        let v: Vec<f64> = cache.pooled.iter().map(|p| p * inv).collect();
        let vu = dot(&v, upstream);
        let dp: Vec<f64> = upstream.iter().zip(&v).map(|(u, vi)| (u - vi * vu) * inv).collect();
        let n = cache.ids.len();
        let count = cache.valid.iter().filter(|&&b| b).count() as f64;
        let mut dx = Mat::zeros(n, d);
        for i in 0..n {
            if cache.valid[i] {
                axpy(dx.row_mut(i), 1.0 / count, &dp);
            }
        }
        for ((b, c), g) in self.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
            dx = b.backward(&dx, c, g);
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            axpy(grads.tok_emb.row_mut(id as usize), 1.0, dx.row(i));
            axpy(grads.pos_emb.row_mut(i), 1.0, dx.row(i));
        }
        Ok(())
    }

    /// Gradients of `upstream · encode(toks)` with respect to every
    /// parameter.
    pub fn encode_grad(&self, toks: &TokenSequence, upstream: &Vector) -> Result<EncoderParams, EncoderError> {
        if upstream.dim() != self.config.dim {
            return Err(EncoderError::ShapeMismatch { expected: self.config.dim, got: upstream.dim() });
        }
        let (_, cache) = self.forward(toks)?;
        let mut g = self.zeros_like();
        self.backward(&cache, &upstream.0, &mut g)?;
        Ok(g)
    }
}
