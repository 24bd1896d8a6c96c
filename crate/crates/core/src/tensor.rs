//! Row-major dense matrices and the handful of kernels the models need.
//!
//! Kernels are written as axpy loops or as dot products with four fixed
//! accumulators, so results are bit-reproducible for a given build.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat {
        Mat::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    /// Stacks `top` above `self`.
    pub fn vstack(top: &Mat, bottom: &Mat) -> Mat {
        assert_eq!(top.cols, bottom.cols);
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Mat::from_vec(top.rows + bottom.rows, top.cols, data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

/// `x · w` for `x: n×k`, `w: k×m`.
pub fn matmul(x: &Mat, w: &Mat) -> Mat {
    assert_eq!(x.cols, w.rows, "matmul shape mismatch");
    let mut out = Mat::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        let orow = &mut out.data[i * w.cols..(i + 1) * w.cols];
        for (p, &a) in x.row(i).iter().enumerate() {
            if a != 0.0 {
                axpy(orow, a, w.row(p));
            }
        }
    }
    out
}

/// `x · wᵀ` for `x: n×k`, `w: m×k`.
pub fn matmul_t(x: &Mat, w: &Mat) -> Mat {
    assert_eq!(x.cols, w.cols, "matmul_t shape mismatch");
    let mut out = Mat::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xr = x.row(i);
        let orow = &mut out.data[i * w.rows..(i + 1) * w.rows];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(xr, w.row(j));
        }
    }
    out
}

/// `acc += xᵀ · y` for `x: n×k`, `y: n×m`, `acc: k×m`.
pub fn matmul_tn_acc(x: &Mat, y: &Mat, acc: &mut Mat) {
    assert_eq!(x.rows, y.rows, "matmul_tn shape mismatch");
    assert_eq!((acc.rows, acc.cols), (x.cols, y.cols), "matmul_tn accumulator shape mismatch");
    for i in 0..x.rows {
        let yr = y.row(i);
        for (p, &a) in x.row(i).iter().enumerate() {
            if a != 0.0 {
                axpy(acc.row_mut(p), a, yr);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Mat {
        Mat::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn kernels_match_naive_products() {
        let x = m(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let w = m(3, 2, &[7., 8., 9., 10., 11., 12.]);
        assert_eq!(matmul(&x, &w).data, vec![58., 64., 139., 154.]);
        let wt = m(2, 3, &[7., 9., 11., 8., 10., 12.]);
        assert_eq!(matmul_t(&x, &wt).data, vec![58., 64., 139., 154.]);
        let y = m(2, 2, &[1., 0., 0., 1.]);
        let mut acc = Mat::zeros(3, 2);
        matmul_tn_acc(&x, &y, &mut acc);
        assert_eq!(acc.data, vec![1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (1..=7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 140.0);
    }
}
