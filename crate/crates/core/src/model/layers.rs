//! Forward and backward passes of the basic layers.

use super::params::{Attention, LayerNorm, Linear, Mlp};
use crate::scalar::Scalar;
use crate::tensor::{gemm, gemm_cols, Mat};

pub const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Linear<T> {
    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = Mat::zeros(x.rows, self.w.cols);
        gemm(T::one(), x.view(), self.w.view(), T::zero(), &mut y);
        y.add_row(self.b.row(0));
        y
    }

    /// Accumulates weight gradients into `g` and returns the input gradient.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, g: &mut Linear<T>) -> Mat<T> {
        gemm(T::one(), x.view().t(), dy.view(), T::one(), &mut g.w);
        dy.col_sums_into(&mut g.b.data);
        let mut dx = Mat::zeros(dy.rows, self.w.rows);
        gemm(T::one(), dy.view(), self.w.view().t(), T::zero(), &mut dx);
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    pub xhat: Mat<T>,
    pub rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
        let d = T::lit(x.cols as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let xh = xhat.row(r);
            for (c, o) in y.row_mut(r).iter_mut().enumerate() {
                *o = xh[c] * self.gamma.data[c] + self.beta.data[c];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &Mat<T>, g: &mut LayerNorm<T>) -> Mat<T> {
        let n = dy.cols;
        let inv_d = T::one() / T::lit(n as f64);
        let mut dx = Mat::zeros(dy.rows, n);
        let mut dxhat = vec![T::zero(); n];
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut sum = T::zero();
            let mut dot = T::zero();
            for c in 0..n {
                g.gamma.data[c] += dyr[c] * xh[c];
                g.beta.data[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gamma.data[c];
                sum += dxhat[c];
                dot += dxhat[c] * xh[c];
            }
            let rs = cache.rstd[r];
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = rs * (dxhat[c] - sum * inv_d - xh[c] * dot * inv_d);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let th = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub x: Mat<T>,
    pub pre: Mat<T>,
    pub act: Mat<T>,
}

impl<T: Scalar> Mlp<T> {
    /// linear -> GELU -> linear, row by row.
    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x);
        let act = Mat::from_vec(pre.rows, pre.cols, pre.data.iter().map(|&v| gelu(v)).collect());
        let y = self.fc2.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Mat<T>, g: &mut Mlp<T>) -> Mat<T> {
        let mut dact = self.fc2.backward(&cache.act, dy, &mut g.fc2);
        for (d, &p) in dact.data.iter_mut().zip(&cache.pre.data) {
            *d *= gelu_grad(p);
        }
        self.fc1.backward(&cache.x, &dact, &mut g.fc1)
    }
}

#[derive(Debug, Clone)]
pub struct MhaCache<T> {
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    /// Softmax attention map of each head, `M x K`.
    pub probs: Vec<Mat<T>>,
    pub ctx: Mat<T>,
}

fn softmax_rows<T: Scalar>(s: &mut Mat<T>) {
    for r in 0..s.rows {
        let row = s.row_mut(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Scaled dot-product attention over `heads` heads of width `D / heads`,
/// followed by the output projection.
pub fn mha_forward<T: Scalar>(p: &Attention<T>, heads: usize, xq: &Mat<T>, xk: &Mat<T>, xv: &Mat<T>) -> (Mat<T>, MhaCache<T>) {
    let q = p.q.forward(xq);
    let k = xk.matmul(&p.k);
    let v = p.v.forward(xv);
    let d = q.cols;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut ctx = Mat::zeros(q.rows, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh;
        let mut s = Mat::zeros(q.rows, k.rows);
        gemm(scale, q.view().col_block(cols, dh), k.view().col_block(cols, dh).t(), T::zero(), &mut s);
        softmax_rows(&mut s);
        gemm_cols(T::one(), s.view(), v.view().col_block(cols, dh), T::zero(), &mut ctx, cols);
        probs.push(s);
    }
    let out = p.o.forward(&ctx);
    (out, MhaCache { q, k, v, probs, ctx })
}

/// Returns gradients with respect to the query, key and value inputs.
#[allow(clippy::too_many_arguments)]
pub fn mha_backward<T: Scalar>(
    p: &Attention<T>,
    heads: usize,
    xq: &Mat<T>,
    xk: &Mat<T>,
    xv: &Mat<T>,
    cache: &MhaCache<T>,
    dout: &Mat<T>,
    g: &mut Attention<T>,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let dctx = p.o.backward(&cache.ctx, dout, &mut g.o);
    let d = cache.q.cols;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let (m, kn) = (cache.q.rows, cache.k.rows);
    let mut dq = Mat::zeros(m, d);
    let mut dk = Mat::zeros(kn, d);
    let mut dv = Mat::zeros(kn, d);
    let mut dp = Mat::zeros(m, kn);
    for h in 0..heads {
        let cols = h * dh;
        let pr = &cache.probs[h];
        gemm(T::one(), dctx.view().col_block(cols, dh), cache.v.view().col_block(cols, dh).t(), T::zero(), &mut dp);
        gemm_cols(T::one(), pr.view().t(), dctx.view().col_block(cols, dh), T::zero(), &mut dv, cols);
        // softmax backward in place: dS = P * (dP - rowsum(dP * P))
        for r in 0..m {
            let prow = pr.row(r);
            let drow = dp.row_mut(r);
            let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                *dv_ = pv * (*dv_ - dot);
            }
        }
        gemm_cols(scale, dp.view(), cache.k.view().col_block(cols, dh), T::zero(), &mut dq, cols);
        gemm_cols(scale, dp.view().t(), cache.q.view().col_block(cols, dh), T::zero(), &mut dk, cols);
    }
    let dxq = p.q.backward(xq, &dq, &mut g.q);
    gemm(T::one(), xk.view().t(), dk.view(), T::one(), &mut g.k);
    let mut dxk = Mat::zeros(dk.rows, p.k.rows);
    gemm(T::one(), dk.view(), p.k.view().t(), T::zero(), &mut dxk);
    let dxv = p.v.backward(xv, &dv, &mut g.v);
    (dxq, dxk, dxv)
}
