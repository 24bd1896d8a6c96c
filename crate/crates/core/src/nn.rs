//! Transformer building blocks with hand-written reverse passes.
//!
//! Every layer owns its weights as [`Mat`]s. A gradient buffer is simply a
//! second instance of the same struct (see [`Params::zeros_like`]); each
//! `backward` accumulates into it and returns the gradient with respect to
//! its input. Caches hold whatever the reverse pass needs; inputs that the
//! caller already owns are passed back in rather than copied.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::hash::Fnv64;
use crate::tensor::{axpy, dot, matmul, matmul_t, matmul_tn_acc, Mat};

/// Uniform access to every trainable tensor, in a fixed order.
pub trait Params: Clone {
    fn tensors(&self) -> Vec<&Mat>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(Mat::set_zero);
        z
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    fn scale_all(&mut self, s: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(s));
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// FNV-1a over shapes and the bit patterns of every value.
    fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::default();
        for t in self.tensors() {
            h.write(&(t.rows as u64).to_le_bytes());
            h.write(&(t.cols as u64).to_le_bytes());
            h.write_f64s(&t.data);
        }
        h.finish()
    }
}

pub fn uniform_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Mat::from_vec(rows, cols, data)
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub w: Mat,
    /// `1 × out`
    pub b: Mat,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        let bound = libm::sqrt(6.0 / (d_in + d_out) as f64);
        Self { w: uniform_mat(rng, d_in, d_out, bound), b: Mat::zeros(1, d_out) }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = matmul(x, &self.w);
        for i in 0..y.rows {
            axpy(y.row_mut(i), 1.0, &self.b.data);
        }
        y
    }

    pub fn backward(&self, x: &Mat, dy: &Mat, g: &mut Linear) -> Mat {
        matmul_tn_acc(x, dy, &mut g.w);
        for i in 0..dy.rows {
            axpy(&mut g.b.data, 1.0, dy.row(i));
        }
        matmul_t(dy, &self.w)
    }
}

impl Params for Linear {
    fn tensors(&self) -> Vec<&Mat> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w, &mut self.b]
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gamma: Mat::from_vec(1, d, vec![1.0; d]), beta: Mat::zeros(1, d) }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.cols;
        let mut xhat = Mat::zeros(x.rows, d);
        let mut y = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std.push(inv);
            let xh = xhat.row_mut(i);
            for (o, v) in xh.iter_mut().zip(r) {
                *o = (v - mean) * inv;
            }
            let yr = y.row_mut(i);
            for c in 0..d {
                yr[c] = self.gamma.data[c] * xhat.data[i * d + c] + self.beta.data[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, dy: &Mat, cache: &LayerNormCache, g: &mut LayerNorm) -> Mat {
        let d = dy.cols;
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![0.0; d];
        for i in 0..dy.rows {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            for c in 0..d {
                g.gamma.data[c] += dyr[c] * xh[c];
                g.beta.data[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gamma.data[c];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dot(&dxhat, xh) / d as f64;
            let inv = cache.inv_std[i];
            let out = dx.row_mut(i);
            for c in 0..d {
                out[c] = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn tensors(&self) -> Vec<&Mat> {
        vec![&self.gamma, &self.beta]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q: Mat,
    k: Mat,
    v: Mat,
    /// One `nq × nk` matrix per head; masked entries are exactly zero.
    probs: Vec<Mat>,
    ctx: Mat,
}

impl AttentionCache {
    pub fn probs(&self) -> &[Mat] {
        &self.probs
    }
}

impl Attention {
    pub fn new<R: Rng>(rng: &mut R, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "model width must divide into heads");
        Self {
            heads,
            wq: Linear::new(rng, d, d),
            wk: Linear::new(rng, d, d),
            wv: Linear::new(rng, d, d),
            wo: Linear::new(rng, d, d),
        }
    }

    /// `causal` hides keys after the query position; `key_valid` hides
    /// keys flagged `false`. A query with no visible key attends to nothing.
    pub fn forward(&self, xq: &Mat, xkv: &Mat, causal: bool, key_valid: Option<&[bool]>) -> (Mat, AttentionCache) {
        let q = self.wq.forward(xq);
        let k = self.wk.forward(xkv);
        let v = self.wv.forward(xkv);
        let (nq, nk, d) = (xq.rows, xkv.rows, q.cols);
        let dh = d / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let visible = |i: usize, j: usize| !(causal && j > i) && key_valid.is_none_or(|kv| kv[j]);
        let mut ctx = Mat::zeros(nq, d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * dh;
            let mut p = Mat::zeros(nq, nk);
            for i in 0..nq {
                let qi = &q.row(i)[off..off + dh];
                let prow = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in prow.iter_mut().enumerate() {
                    if visible(i, j) {
                        let s = dot(qi, &k.row(j)[off..off + dh]) * scale;
                        *pj = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for (j, pj) in prow.iter_mut().enumerate() {
                    if visible(i, j) {
                        *pj = libm::exp(*pj - max);
                        sum += *pj;
                    }
                }
                let inv = 1.0 / sum;
                prow.iter_mut().for_each(|pj| *pj *= inv);
                let crow = &mut ctx.row_mut(i)[off..off + dh];
                for (j, &pj) in prow.iter().enumerate() {
                    if pj != 0.0 {
                        axpy(crow, pj, &v.row(j)[off..off + dh]);
                    }
                }
            }
            probs.push(p);
        }
        let out = self.wo.forward(&ctx);
        (out, AttentionCache { q, k, v, probs, ctx })
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&self, dout: &Mat, xq: &Mat, xkv: &Mat, cache: &AttentionCache, g: &mut Attention) -> (Mat, Mat) {
        let dctx = self.wo.backward(&cache.ctx, dout, &mut g.wo);
        let (nq, nk, d) = (xq.rows, xkv.rows, cache.q.cols);
        let dh = d / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut dq = Mat::zeros(nq, d);
        let mut dk = Mat::zeros(nk, d);
        let mut dv = Mat::zeros(nk, d);
        let mut dp = vec![0.0; nk];
        for (h, p) in cache.probs.iter().enumerate() {
            let off = h * dh;
            for i in 0..nq {
                let prow = p.row(i);
                let dci = &dctx.row(i)[off..off + dh];
                let mut weighted = 0.0;
                for j in 0..nk {
                    let pij = prow[j];
                    if pij == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(dci, &cache.v.row(j)[off..off + dh]);
                    weighted += pij * dp[j];
                    axpy(&mut dv.row_mut(j)[off..off + dh], pij, dci);
                }
                let qi = &cache.q.row(i)[off..off + dh];
                for j in 0..nk {
                    let pij = prow[j];
                    if pij == 0.0 {
                        continue;
                    }
                    let ds = pij * (dp[j] - weighted) * scale;
                    axpy(&mut dq.row_mut(i)[off..off + dh], ds, &cache.k.row(j)[off..off + dh]);
                    axpy(&mut dk.row_mut(j)[off..off + dh], ds, qi);
                }
            }
        }
        let dxq = self.wq.backward(xq, &dq, &mut g.wq);
        let mut dxkv = self.wk.backward(xkv, &dk, &mut g.wk);
        dxkv.add_assign(&self.wv.backward(xkv, &dv, &mut g.wv));
        (dxq, dxkv)
    }
}

impl Params for Attention {
    fn tensors(&self) -> Vec<&Mat> {
        [&self.wq, &self.wk, &self.wv, &self.wo].into_iter().flat_map(|l| l.tensors()).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo].into_iter().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    pre: Mat,
    act: Mat,
}

impl FeedForward {
    pub fn new<R: Rng>(rng: &mut R, d: usize, hidden: usize) -> Self {
        Self { up: Linear::new(rng, d, hidden), down: Linear::new(rng, hidden, d) }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, FeedForwardCache) {
        let pre = self.up.forward(x);
        let mut act = pre.clone();
        act.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let out = self.down.forward(&act);
        (out, FeedForwardCache { pre, act })
    }

    pub fn backward(&self, dy: &Mat, x: &Mat, cache: &FeedForwardCache, g: &mut FeedForward) -> Mat {
        let mut da = self.down.backward(&cache.act, dy, &mut g.down);
        for (d, p) in da.data.iter_mut().zip(&cache.pre.data) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        self.up.backward(x, &da, &mut g.up)
    }
}

impl Params for FeedForward {
    fn tensors(&self) -> Vec<&Mat> {
        let mut t = self.up.tensors();
        t.extend(self.down.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut t = self.up.tensors_mut();
        t.extend(self.down.tensors_mut());
        t
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct EncoderBlockCache {
    n1: Mat,
    ln1: LayerNormCache,
    attn: AttentionCache,
    n2: Mat,
    ln2: LayerNormCache,
    ffn: FeedForwardCache,
}

impl EncoderBlock {
    pub fn new<R: Rng>(rng: &mut R, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            attn: Attention::new(rng, d, heads),
            ln2: LayerNorm::new(d),
            ffn: FeedForward::new(rng, d, hidden),
        }
    }

    pub fn forward(&self, x: &Mat, key_valid: Option<&[bool]>) -> (Mat, EncoderBlockCache) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1, &n1, false, key_valid);
        let h = add(x, &a);
        let (n2, ln2) = self.ln2.forward(&h);
        let (f, ffn) = self.ffn.forward(&n2);
        let y = add(&h, &f);
        (y, EncoderBlockCache { n1, ln1, attn, n2, ln2, ffn })
    }

    pub fn backward(&self, dy: &Mat, c: &EncoderBlockCache, g: &mut EncoderBlock) -> Mat {
        let dn2 = self.ffn.backward(dy, &c.n2, &c.ffn, &mut g.ffn);
        let dh = add(dy, &self.ln2.backward(&dn2, &c.ln2, &mut g.ln2));
        let (dq, dkv) = self.attn.backward(&dh, &c.n1, &c.n1, &c.attn, &mut g.attn);
        let dn1 = add(&dq, &dkv);
        add(&dh, &self.ln1.backward(&dn1, &c.ln1, &mut g.ln1))
    }
}

impl Params for EncoderBlock {
    fn tensors(&self) -> Vec<&Mat> {
        let mut t = self.ln1.tensors();
        t.extend(self.attn.tensors());
        t.extend(self.ln2.tensors());
        t.extend(self.ffn.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut t = self.ln1.tensors_mut();
        t.extend(self.attn.tensors_mut());
        t.extend(self.ln2.tensors_mut());
        t.extend(self.ffn.tensors_mut());
        t
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over a
/// memory, feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderBlockCache {
    n1: Mat,
    ln1: LayerNormCache,
    self_attn: AttentionCache,
    n2: Mat,
    ln2: LayerNormCache,
    cross_attn: AttentionCache,
    n3: Mat,
    ln3: LayerNormCache,
    ffn: FeedForwardCache,
}

impl DecoderBlockCache {
    pub fn cross_probs(&self) -> &[Mat] {
        self.cross_attn.probs()
    }
}

impl DecoderBlock {
    pub fn new<R: Rng>(rng: &mut R, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            self_attn: Attention::new(rng, d, heads),
            ln2: LayerNorm::new(d),
            cross_attn: Attention::new(rng, d, heads),
            ln3: LayerNorm::new(d),
            ffn: FeedForward::new(rng, d, hidden),
        }
    }

    pub fn forward(&self, x: &Mat, memory: &Mat, memory_valid: Option<&[bool]>) -> (Mat, DecoderBlockCache) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, self_attn) = self.self_attn.forward(&n1, &n1, true, None);
        let h1 = add(x, &a);
        let (n2, ln2) = self.ln2.forward(&h1);
        let (c, cross_attn) = self.cross_attn.forward(&n2, memory, false, memory_valid);
        let h2 = add(&h1, &c);
        let (n3, ln3) = self.ln3.forward(&h2);
        let (f, ffn) = self.ffn.forward(&n3);
        let y = add(&h2, &f);
        (y, DecoderBlockCache { n1, ln1, self_attn, n2, ln2, cross_attn, n3, ln3, ffn })
    }

    /// Returns `(d x, d memory)`.
    pub fn backward(&self, dy: &Mat, memory: &Mat, c: &DecoderBlockCache, g: &mut DecoderBlock) -> (Mat, Mat) {
        let dn3 = self.ffn.backward(dy, &c.n3, &c.ffn, &mut g.ffn);
        let dh2 = add(dy, &self.ln3.backward(&dn3, &c.ln3, &mut g.ln3));
        let (dn2, dmem) = self.cross_attn.backward(&dh2, &c.n2, memory, &c.cross_attn, &mut g.cross_attn);
        let dh1 = add(&dh2, &self.ln2.backward(&dn2, &c.ln2, &mut g.ln2));
        let (dq, dkv) = self.self_attn.backward(&dh1, &c.n1, &c.n1, &c.self_attn, &mut g.self_attn);
        let dn1 = add(&dq, &dkv);
        let dx = add(&dh1, &self.ln1.backward(&dn1, &c.ln1, &mut g.ln1));
        (dx, dmem)
    }
}

impl Params for DecoderBlock {
    fn tensors(&self) -> Vec<&Mat> {
        let mut t = self.ln1.tensors();
        t.extend(self.self_attn.tensors());
        t.extend(self.ln2.tensors());
        t.extend(self.cross_attn.tensors());
        t.extend(self.ln3.tensors());
        t.extend(self.ffn.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut t = self.ln1.tensors_mut();
        t.extend(self.self_attn.tensors_mut());
        t.extend(self.ln2.tensors_mut());
        t.extend(self.cross_attn.tensors_mut());
        t.extend(self.ln3.tensors_mut());
        t.extend(self.ffn.tensors_mut());
        t
    }
}

impl<P: Params> Params for Vec<P> {
    fn tensors(&self) -> Vec<&Mat> {
        self.iter().flat_map(Params::tensors).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.iter_mut().flat_map(Params::tensors_mut).collect()
    }
}

/// Row-wise numerically stable log-softmax.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
    let lse = max + libm::log(sum);
    row.iter().map(|v| v - lse).collect()
}
