//! Evaluation metrics: ordinal error, standardized RMSE, RMSE and mean
//! absolute relative error. All statistics run over GT-valid pixels and
//! are accumulated in `f64` regardless of the field scalar.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::DepthField;
use crate::losses::DEFAULT_EPSILON;
use crate::scalar::{to_f64, Real};

/// Ratio tolerance of the ordinal labels.
pub const OE_THRESHOLD: f64 = 0.01;
/// Pairs sampled for the ordinal error when more exist.
pub const DEFAULT_PAIR_COUNT: usize = 50_000;
/// GT values at or below this are excluded from the relative error.
pub const ABS_REL_FLOOR: f64 = 1e-6;
/// Predictions are floored here before forming ratios.
pub const RATIO_FLOOR: f64 = 1e-6;

/// `+1` if `a/b ≥ 1+τ`, `−1` if `a/b ≤ 1/(1+τ)`, else 0.
pub fn ordinal_label(a: f64, b: f64, tau: f64) -> i8 {
    let r = a / b;
    if r >= 1.0 + tau {
        1
    } else if r <= 1.0 / (1.0 + tau) {
        -1
    } else {
        0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub oe: f64,
    pub srmse: f64,
    pub rmse: f64,
    pub abs_rel: f64,
    /// GT-valid pixels evaluated.
    pub pixel_count: usize,
    /// Pixel pairs behind `oe`.
    pub pair_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub pair_count: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            pair_count: DEFAULT_PAIR_COUNT,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

fn check_len<T: Real>(d: &[T], z: &DepthField<T>) {
    assert_eq!(
        d.len(),
        z.len(),
        "prediction and GT must have the same pixel count"
    );
}

/// Unordered pair number `k` of `n` items, in row order `(0,1), (0,2), …`.
fn decode_pair(k: usize, n: usize) -> (usize, usize) {
    // Row i starts at offset i*n - i*(i+1)/2.
    let start = |i: usize| i * n - i * (i + 1) / 2;
    let nf = n as f64;
    let mut i = ((2.0 * nf - 1.0 - ((2.0 * nf - 1.0).powi(2) - 8.0 * k as f64).max(0.0).sqrt())
        / 2.0) as usize;
    i = i.min(n - 2);
    while i > 0 && start(i) > k {
        i -= 1;
    }
    while start(i + 1) <= k {
        i += 1;
    }
    (i, i + 1 + k - start(i))
}

/// Fraction of pixel pairs whose ordinal label under `d` differs from the
/// label under `z`, and the number of pairs used. Pairs are drawn without
/// replacement from GT-valid pixels with positive depth, all of them when
/// there are at most `pair_count`.
pub fn metric_oe_with_count<T: Real>(
    d: &[T],
    z: &DepthField<T>,
    pair_count: usize,
    seed: u64,
) -> (f64, usize) {
    check_len(d, z);
    let pixels: Vec<usize> = (0..z.len())
        .filter(|&i| z.valid()[i] && to_f64(z.values()[i]) > 0.0)
        .collect();
    let n = pixels.len();
    if n < 2 || pair_count == 0 {
        log::warn!("ordinal error: {n} usable pixels, reporting 0");
        return (0.0, 0);
    }
    let total = n * (n - 1) / 2;
    let disagree = |k: usize| -> bool {
        let (a, b) = decode_pair(k, n);
        let (i, j) = (pixels[a], pixels[b]);
        let di = to_f64(d[i]).max(RATIO_FLOOR);
        let dj = to_f64(d[j]).max(RATIO_FLOOR);
        let zi = to_f64(z.values()[i]);
        let zj = to_f64(z.values()[j]);
        ordinal_label(di, dj, OE_THRESHOLD) != ordinal_label(zi, zj, OE_THRESHOLD)
    };
    let (wrong, used) = if total <= pair_count {
        ((0..total).filter(|&k| disagree(k)).count(), total)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = index::sample(&mut rng, total, pair_count);
        (picks.iter().filter(|&k| disagree(k)).count(), pair_count)
    };
    (wrong as f64 / used as f64, used)
}

pub fn metric_oe<T: Real>(d: &[T], z: &DepthField<T>, pair_count: usize, seed: u64) -> f64 {
    metric_oe_with_count(d, z, pair_count, seed).0
}

/// Mean and mean absolute deviation of `v` over `domain`.
fn g2s_stats(v: impl Iterator<Item = f64> + Clone, count: f64) -> (f64, f64) {
    let mean = v.clone().sum::<f64>() / count;
    let spread = v.map(|x| (x - mean).abs()).sum::<f64>() / count;
    (mean, spread)
}

/// RMS difference of the mean/mean-deviation standardized fields.
pub fn metric_srmse<T: Real>(d: &[T], z: &DepthField<T>, epsilon: f64) -> f64 {
    check_len(d, z);
    let idx: Vec<usize> = (0..z.len()).filter(|&i| z.valid()[i]).collect();
    if idx.is_empty() {
        log::warn!("srmse: no valid GT pixel, reporting 0");
        return 0.0;
    }
    let m = idx.len() as f64;
    let (dc, ds) = g2s_stats(idx.iter().map(|&i| to_f64(d[i])), m);
    let (zc, zs) = g2s_stats(idx.iter().map(|&i| to_f64(z.values()[i])), m);
    let sq: f64 = idx
        .iter()
        .map(|&i| {
            let a = (to_f64(d[i]) - dc) / (ds + epsilon);
            let b = (to_f64(z.values()[i]) - zc) / (zs + epsilon);
            (a - b) * (a - b)
        })
        .sum();
    (sq / m).sqrt()
}

pub fn metric_rmse<T: Real>(d: &[T], z: &DepthField<T>) -> f64 {
    check_len(d, z);
    let mut sq = 0.0;
    let mut m = 0usize;
    for i in 0..z.len() {
        if z.valid()[i] {
            let e = to_f64(d[i]) - to_f64(z.values()[i]);
            sq += e * e;
            m += 1;
        }
    }
    if m == 0 {
        log::warn!("rmse: no valid GT pixel, reporting 0");
        return 0.0;
    }
    (sq / m as f64).sqrt()
}

/// Mean of `|d − z| / z` over GT-valid pixels with `z > 1e-6`.
pub fn metric_abs<T: Real>(d: &[T], z: &DepthField<T>) -> f64 {
    check_len(d, z);
    let mut acc = 0.0;
    let mut m = 0usize;
    for i in 0..z.len() {
        let zv = to_f64(z.values()[i]);
        if z.valid()[i] && zv > ABS_REL_FLOOR {
            acc += (to_f64(d[i]) - zv).abs() / zv;
            m += 1;
        }
    }
    if m == 0 {
        log::warn!("abs: no pixel with positive GT, reporting 0");
        return 0.0;
    }
    acc / m as f64
}

pub fn compute_metrics<T: Real>(d: &[T], z: &DepthField<T>, config: &MetricConfig) -> MetricReport {
    let (oe, pair_count) = metric_oe_with_count(d, z, config.pair_count, config.seed);
    MetricReport {
        oe,
        srmse: metric_srmse(d, z, config.epsilon),
        rmse: metric_rmse(d, z),
        abs_rel: metric_abs(d, z),
        pixel_count: z.valid_count(),
        pair_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(vals: &[f64]) -> DepthField<f64> {
        DepthField::dense(1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn pair_decoding_is_row_order() {
        for n in [2, 3, 7, 50] {
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    assert_eq!(decode_pair(k, n), (i, j), "n={n} k={k}");
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn labels_follow_the_ratio_threshold() {
        assert_eq!(ordinal_label(1.005, 1.0, OE_THRESHOLD), 0);
        assert_eq!(ordinal_label(1.02, 1.0, OE_THRESHOLD), 1);
        assert_eq!(ordinal_label(1.0, 1.02, OE_THRESHOLD), -1);
    }

    #[test]
    fn oe_examples() {
        let z = field(&[1.02, 1.0]);
        assert_eq!(metric_oe(&[1.005, 1.0], &z, DEFAULT_PAIR_COUNT, 0), 1.0);
        let z = field(&[0.3, 0.5, 0.9, 0.1]);
        assert_eq!(metric_oe(z.values(), &z, DEFAULT_PAIR_COUNT, 0), 0.0);
        let scaled: Vec<f64> = z.values().iter().map(|v| 7.0 * v).collect();
        assert_eq!(metric_oe(&scaled, &z, DEFAULT_PAIR_COUNT, 0), 0.0);
        assert_eq!(metric_oe(&[1.0], &field(&[1.0]), 10, 0), 0.0);
    }

    #[test]
    fn oe_sampling_is_seeded() {
        let vals: Vec<f64> = (0..400)
            .map(|i| 0.1 + ((i * 37 % 101) as f64) / 100.0)
            .collect();
        let z = DepthField::dense(20, 20, vals.clone()).unwrap();
        let d: Vec<f64> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.05 * ((i % 7) as f64))
            .collect();
        let (a, n) = metric_oe_with_count(&d, &z, 1000, 3);
        assert_eq!(n, 1000);
        assert_eq!(a, metric_oe(&d, &z, 1000, 3));
        let all = metric_oe(&d, &z, usize::MAX, 0);
        assert!((a - all).abs() < 0.06);
    }

    #[test]
    fn srmse_examples() {
        let z = field(&[0.0, 1.0]);
        assert!(metric_srmse(&[0.0, 2.0], &z, DEFAULT_EPSILON) < 1e-5);
        let z = field(&[0.2, 0.5, 0.9, 0.4]);
        assert_eq!(metric_srmse(z.values(), &z, DEFAULT_EPSILON), 0.0);
        let d: Vec<f64> = z.values().iter().map(|v| 10.0 * v - 5.0).collect();
        assert!(metric_srmse(&d, &z, DEFAULT_EPSILON) < 1e-4);
    }

    #[test]
    fn rmse_and_abs_examples() {
        let z = DepthField::new(
            1,
            4,
            vec![0.2, 0.5, 0.0, 0.4],
            vec![true, true, true, false],
        )
        .unwrap();
        let d = [0.22, 0.55, 0.0, 7.0];
        assert!((metric_abs(&d, &z) - 0.1).abs() < 1e-12);
        let shifted = [0.5, 0.8, 0.3, 0.0];
        assert!((metric_rmse(&shifted, &z) - 0.3).abs() < 1e-12);
        assert_eq!(metric_rmse(z.values(), &z), 0.0);
        assert_eq!(metric_abs(z.values(), &z), 0.0);
    }

    #[test]
    fn empty_domain_reports_zero() {
        let z = DepthField::<f64>::empty(2, 2);
        let r = compute_metrics(&[1.0; 4], &z, &MetricConfig::default());
        assert_eq!(
            (r.oe, r.srmse, r.rmse, r.abs_rel, r.pair_count),
            (0.0, 0.0, 0.0, 0.0, 0)
        );
    }
}
