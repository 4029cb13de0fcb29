//! Per-channel batch normalization over the N, H, W axes.

use crate::scalar::{lit, Real};

pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
}

pub(crate) fn batch_stats<T: Real>(n: usize, c: usize, hw: usize, x: &[T]) -> BatchStats<T> {
    let count = lit::<T>((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .copied()
                .sum::<T>();
        }
        let m = s / count;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                q += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    BatchStats { mean, var }
}

pub(crate) fn forward<T: Real>(
    dims: (usize, usize, usize),
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Vec<T> {
    let (n, c, hw) = dims;
    let stats = batch_stats(n, c, hw, x);
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        let inv = T::one() / (stats.var[ch] + eps).sqrt();
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                *o = (v - stats.mean[ch]) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    y
}

/// Returns gradients for (input, gamma, beta).
pub(crate) fn backward<T: Real>(
    dims: (usize, usize, usize),
    x: &[T],
    gamma: &[T],
    eps: T,
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = dims;
    let stats = batch_stats(n, c, hw, x);
    let m = lit::<T>((n * hw) as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let inv = T::one() / (stats.var[ch] + eps).sqrt();
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&g, &v) in gy[r.clone()].iter().zip(&x[r]) {
                let xhat = (v - stats.mean[ch]) * inv;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        ggamma[ch] = sum_gx;
        gbeta[ch] = sum_g;
        let scale = gamma[ch] * inv / m;
        for b in 0..n {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for ((o, &g), &v) in gx[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&x[r]) {
                let xhat = (v - stats.mean[ch]) * inv;
                *o = scale * (m * g - sum_g - xhat * sum_gx);
            }
        }
    }
    (gx, ggamma, gbeta)
}
