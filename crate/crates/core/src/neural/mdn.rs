//! Gaussian mixture heads: parameterisation, negative log-likelihood and the
//! adjoints of both.
//!
//! A raw head row of length `K (1 + 2D)` is laid out as
//! `[logits (K) | means (K x D) | sigma pre-activations (K x D)]`.

use super::Real;
use ndarray::{Array2, ArrayView2};

/// Lower bound added to every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;
const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixtureSpec {
    pub components: usize,
    pub dim: usize,
}

impl MixtureSpec {
    pub fn raw_len(&self) -> usize {
        self.components * (1 + 2 * self.dim)
    }
}

fn softplus<T: Real>(x: T) -> T {
    let zero = T::zero();
    x.max(zero) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// One mixture in plain form.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensityOutput {
    pub dim: usize,
    pub weights: Vec<f64>,
    /// `K x D`, row-major.
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl MixtureDensityOutput {
    pub fn from_raw(spec: MixtureSpec, raw: &[f64]) -> Self {
        let k = spec.components;
        let kd = k * spec.dim;
        let mut weights = vec![0.0; k];
        softmax_into(&raw[..k], &mut weights);
        Self {
            dim: spec.dim,
            weights,
            means: raw[k..k + kd].to_vec(),
            sigmas: raw[k + kd..k + 2 * kd]
                .iter()
                .map(|&s| softplus(s) + SIGMA_FLOOR)
                .collect(),
        }
    }

    fn component_log_density(&self, k: usize, y: &[f64]) -> f64 {
        (0..self.dim)
            .map(|d| {
                let s = self.sigmas[k * self.dim + d];
                let z = (y[d] - self.means[k * self.dim + d]) / s;
                -0.5 * z * z - s.ln() - HALF_LOG_TWO_PI
            })
            .sum()
    }

    /// `-log sum_k w_k N(y; mu_k, diag sigma_k^2)` via log-sum-exp.
    pub fn nll(&self, y: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| self.weights[k].ln() + self.component_log_density(k, y))
            .collect();
        let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        -(m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
    }

    /// NLL of a single component taken alone.
    pub fn component_nll(&self, k: usize, y: &[f64]) -> f64 {
        -self.component_log_density(k, y)
    }

    /// Mean of the most probable component.
    pub fn mode_mean(&self) -> Vec<f64> {
        let k = (0..self.weights.len())
            .max_by(|&a, &b| self.weights[a].total_cmp(&self.weights[b]))
            .unwrap_or(0);
        self.means[k * self.dim..(k + 1) * self.dim].to_vec()
    }
}

/// Summed NLL over rows; writes `scale * dNLL/draw` into `draw`.
pub fn nll_and_grad<T: Real>(
    spec: MixtureSpec,
    raw: ArrayView2<T>,
    targets: ArrayView2<T>,
    scale: T,
    draw: &mut Array2<T>,
) -> f64 {
    let k = spec.components;
    let dim = spec.dim;
    let kd = k * dim;
    let floor = T::c(SIGMA_FLOOR);
    let mut total = 0.0;
    let mut weights = vec![T::zero(); k];
    let mut terms = vec![T::zero(); k];
    let mut post = vec![T::zero(); k];
    for (row, (r, y)) in raw.rows().into_iter().zip(targets.rows()).enumerate() {
        let r = r.to_vec();
        softmax_into(&r[..k], &mut weights);
        for (c, t) in terms.iter_mut().enumerate() {
            let mut acc = weights[c].ln();
            for d in 0..dim {
                let s = softplus(r[k + kd + c * dim + d]) + floor;
                let z = (y[d] - r[k + c * dim + d]) / s;
                acc -= T::c(0.5) * z * z + s.ln() + T::c(HALF_LOG_TWO_PI);
            }
            *t = acc;
        }
        let m = terms.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + terms.iter().map(|&t| (t - m).exp()).fold(T::zero(), |a, b| a + b).ln();
        total -= lse.f64();
        for (p, &t) in post.iter_mut().zip(&terms) {
            *p = (t - lse).exp();
        }
        let mut out = draw.row_mut(row);
        for c in 0..k {
            out[c] = scale * (weights[c] - post[c]);
            for d in 0..dim {
                let pre = r[k + kd + c * dim + d];
                let s = softplus(pre) + floor;
                let diff = y[d] - r[k + c * dim + d];
                out[k + c * dim + d] = -scale * post[c] * diff / (s * s);
                let ds = -post[c] * (diff * diff / (s * s * s) - T::one() / s);
                out[k + kd + c * dim + d] = scale * ds * sigmoid(pre);
            }
        }
    }
    total
}

/// Maps raw rows to `[weights | means | sigmas]`.
pub fn processed<T: Real>(spec: MixtureSpec, raw: ArrayView2<T>) -> Array2<T> {
    let k = spec.components;
    let kd = k * spec.dim;
    let floor = T::c(SIGMA_FLOOR);
    let mut out = Array2::zeros(raw.raw_dim());
    for (r, mut o) in raw.rows().into_iter().zip(out.rows_mut()) {
        let r = r.to_vec();
        let o = o.as_slice_mut().unwrap();
        softmax_into(&r[..k], &mut o[..k]);
        o[k..k + kd].copy_from_slice(&r[k..k + kd]);
        for i in k + kd..k + 2 * kd {
            o[i] = softplus(r[i]) + floor;
        }
    }
    out
}

/// Adjoint of `processed`.
pub fn processed_backward<T: Real>(spec: MixtureSpec, raw: ArrayView2<T>, dproc: ArrayView2<T>) -> Array2<T> {
    let k = spec.components;
    let kd = k * spec.dim;
    let mut w = vec![T::zero(); k];
    let mut out = Array2::zeros(raw.raw_dim());
    for ((r, d), mut o) in raw.rows().into_iter().zip(dproc.rows()).zip(out.rows_mut()) {
        let r = r.to_vec();
        softmax_into(&r[..k], &mut w);
        let dot = (0..k).fold(T::zero(), |a, c| a + w[c] * d[c]);
        for c in 0..k {
            o[c] = w[c] * (d[c] - dot);
        }
        for i in k..k + kd {
            o[i] = d[i];
        }
        for i in k + kd..k + 2 * kd {
            o[i] = d[i] * sigmoid(r[i]);
        }
    }
    out
}
