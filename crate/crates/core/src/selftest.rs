//! Built-in checks: finite-difference gradient checks for every graph
//! operation and loss, a whole-network gradient check, and brute-force
//! reference implementations of the metrics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{check, Coordinates};
use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::error::Result;
use crate::field::DepthField;
use crate::losses::{
    loss_affine_invariant, loss_g2, loss_l1, loss_l2, loss_ranking, loss_scale_invariant,
    GradientOperator, LossConfig, Standardization,
};
use crate::metrics::{
    metric_abs, metric_oe_with_count, metric_rmse, metric_srmse, DEFAULT_PAIR_COUNT,
};
use crate::net::{Mode, NetConfig, Network};
use crate::seed::rng_from;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound for single operations and losses.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the whole toy network.
pub const NET_TOLERANCE: f64 = 1e-3;
/// Absolute bound between a metric and its brute-force reference.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values in ±[0.2, 1], away from the kinks of abs and relu.
fn signed(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.2, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

type Build = fn(&mut Graph<f64>, &mut ChaCha8Rng) -> Result<(Var, Vec<Var>)>;

/// Contracts a tensor output with fixed random weights so every output
/// entry reaches the scalar.
fn contract(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.input(uniform(rng, shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p)?)
}

fn op_cases() -> Vec<(&'static str, Build)> {
    const M: [usize; 4] = [1, 1, 8, 8];
    const NCHW: [usize; 4] = [2, 2, 8, 8];
    vec![
        ("add", |g, r| {
            let (a, b) = (
                g.param(signed(r, M.to_vec())),
                g.param(signed(r, M.to_vec())),
            );
            let o = g.add(a, b)?;
            Ok((contract(g, r, o)?, vec![a, b]))
        }),
        ("sub", |g, r| {
            let (a, b) = (
                g.param(signed(r, M.to_vec())),
                g.param(signed(r, M.to_vec())),
            );
            let o = g.sub(a, b)?;
            Ok((contract(g, r, o)?, vec![a, b]))
        }),
        ("mul", |g, r| {
            let (a, b) = (
                g.param(signed(r, M.to_vec())),
                g.param(signed(r, M.to_vec())),
            );
            let o = g.mul(a, b)?;
            Ok((contract(g, r, o)?, vec![a, b]))
        }),
        ("mul_broadcast_scalar", |g, r| {
            let (a, s) = (g.param(signed(r, M.to_vec())), g.param(signed(r, vec![1])));
            let o = g.mul(a, s)?;
            Ok((contract(g, r, o)?, vec![a, s]))
        }),
        ("div", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let b = g.param(uniform(r, M.to_vec(), 0.5, 1.5));
            let o = g.div(a, b)?;
            Ok((contract(g, r, o)?, vec![a, b]))
        }),
        ("abs", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let o = g.abs(a)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("relu", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let o = g.relu(a)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("log", |g, r| {
            let a = g.param(uniform(r, M.to_vec(), 0.5, 2.0));
            let o = g.log(a)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("square", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let o = g.square(a)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("sqrt", |g, r| {
            let a = g.param(uniform(r, M.to_vec(), 0.5, 2.0));
            let o = g.sqrt(a)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("exp", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let o = g.exp(a)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("neg_affine_clamp", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let o = g.neg(a)?;
            let o = g.affine(o, 1.7, 0.3)?;
            let o = g.clamp_min(o, 0.05)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("sum_mean", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let s = g.sum(a)?;
            let m = g.mean(a)?;
            let m = g.mul_scalar(m, 3.0)?;
            Ok((g.add(s, m)?, vec![a]))
        }),
        ("masked_sum_mean", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let mask = random_mask(r, 64, 0.6);
            let s = g.masked_sum(a, &mask)?;
            let m = g.masked_mean(a, &mask, 1e-6)?;
            let m = g.mul_scalar(m, 5.0)?;
            Ok((g.add(s, m)?, vec![a]))
        }),
        ("median", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let mask = random_mask(r, 64, 0.7);
            let m1 = g.median(a, Some(&mask))?;
            let m2 = g.median(a, None)?;
            Ok((g.add(m1, m2)?, vec![a]))
        }),
        ("gather", |g, r| {
            let a = g.param(signed(r, M.to_vec()));
            let idx: Vec<usize> = (0..40).map(|_| r.random_range(0..64)).collect();
            let o = g.gather(a, &idx)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("batch_item", |g, r| {
            let a = g.param(signed(r, NCHW.to_vec()));
            let o = g.batch_item(a, 1)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("conv2d_3x3_stride1", |g, r| {
            let x = g.param(signed(r, NCHW.to_vec()));
            let w = g.param(signed(r, vec![3, 2, 3, 3]));
            let b = g.param(signed(r, vec![3]));
            let o = g.conv2d(x, w, Some(b), 1)?;
            Ok((contract(g, r, o)?, vec![x, w, b]))
        }),
        ("conv2d_3x3_stride2", |g, r| {
            let x = g.param(signed(r, NCHW.to_vec()));
            let w = g.param(signed(r, vec![3, 2, 3, 3]));
            let b = g.param(signed(r, vec![3]));
            let o = g.conv2d(x, w, Some(b), 2)?;
            Ok((contract(g, r, o)?, vec![x, w, b]))
        }),
        ("conv2d_1x1", |g, r| {
            let x = g.param(signed(r, NCHW.to_vec()));
            let w = g.param(signed(r, vec![3, 2, 1, 1]));
            let o = g.conv2d(x, w, None, 1)?;
            Ok((contract(g, r, o)?, vec![x, w]))
        }),
        ("upsample2", |g, r| {
            let a = g.param(signed(r, NCHW.to_vec()));
            let o = g.upsample2(a)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("downsample2", |g, r| {
            let a = g.param(signed(r, NCHW.to_vec()));
            let o = g.downsample2(a)?;
            Ok((contract(g, r, o)?, vec![a]))
        }),
        ("sobel_gradients", |g, r| {
            let a = g.param(signed(r, NCHW.to_vec()));
            let (gh, gw) = g.sobel_gradients(a)?;
            let lh = contract(g, r, gh)?;
            let lw = contract(g, r, gw)?;
            Ok((g.add(lh, lw)?, vec![a]))
        }),
        ("forward_diff", |g, r| {
            let a = g.param(signed(r, NCHW.to_vec()));
            let dh = g.forward_diff(a, Axis::H)?;
            let dw = g.forward_diff(a, Axis::W)?;
            let lh = contract(g, r, dh)?;
            let lw = contract(g, r, dw)?;
            Ok((g.add(lh, lw)?, vec![a]))
        }),
        ("concat_channels", |g, r| {
            let a = g.param(signed(r, NCHW.to_vec()));
            let b = g.param(signed(r, vec![2, 3, 8, 8]));
            let o = g.concat_channels(a, b)?;
            Ok((contract(g, r, o)?, vec![a, b]))
        }),
        ("batch_norm", |g, r| {
            let x = g.param(signed(r, NCHW.to_vec()));
            let gamma = g.param(uniform(r, vec![2], 0.5, 1.5));
            let beta = g.param(signed(r, vec![2]));
            let o = g.batch_norm(x, gamma, beta, 1e-5)?;
            Ok((contract(g, r, o)?, vec![x, gamma, beta]))
        }),
        ("channel_affine", |g, r| {
            let x = g.param(signed(r, NCHW.to_vec()));
            let o = g.channel_affine(x, vec![0.5, -1.5], vec![0.1, 0.2])?;
            Ok((contract(g, r, o)?, vec![x]))
        }),
    ]
}

/// Random 8×8 GT (with holes), raw input (sparse) and prediction.
fn loss_fixture(rng: &mut ChaCha8Rng) -> (DepthField<f64>, DepthField<f64>, Tensor<f64>) {
    let n = 64;
    let zv: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let z = DepthField::new(8, 8, zv, random_mask(rng, n, 0.85)).expect("valid field");
    let x = z.masked(&random_mask(rng, n, 0.3));
    let d = uniform(rng, vec![1, 1, 8, 8], 0.1, 1.2);
    (z, x, d)
}

type LossBuild =
    fn(&mut Graph<f64>, Var, &DepthField<f64>, &DepthField<f64>, &mut ChaCha8Rng) -> Result<Var>;

fn loss_cases() -> Vec<(&'static str, LossBuild)> {
    fn g2(
        g: &mut Graph<f64>,
        d: Var,
        z: &DepthField<f64>,
        x: &DepthField<f64>,
        s: Standardization,
        o: GradientOperator,
    ) -> Result<Var> {
        let cfg = LossConfig {
            standardization: s,
            operator: o,
            ..LossConfig::default()
        };
        Ok(loss_g2(g, d, z, x, &cfg)?.0)
    }
    vec![
        ("g2_g2s_sobel", |g, d, z, x, _| {
            g2(g, d, z, x, Standardization::G2S, GradientOperator::Sobel)
        }),
        ("g2_g2s_diff", |g, d, z, x, _| {
            g2(g, d, z, x, Standardization::G2S, GradientOperator::Diff)
        }),
        ("g2_zs_sobel", |g, d, z, x, _| {
            g2(g, d, z, x, Standardization::ZS, GradientOperator::Sobel)
        }),
        ("g2_ms_sobel", |g, d, z, x, _| {
            g2(g, d, z, x, Standardization::MS, GradientOperator::Sobel)
        }),
        ("l1", |g, d, z, _, _| loss_l1(g, d, z)),
        ("l2", |g, d, z, _, _| loss_l2(g, d, z)),
        ("scale_invariant", |g, d, z, _, _| {
            loss_scale_invariant(g, d, z)
        }),
        ("affine_invariant", |g, d, z, _, _| {
            loss_affine_invariant(g, d, z, 1e-6)
        }),
        ("ranking", |g, d, z, _, r| {
            let pairs: Vec<(usize, usize)> = (0..60)
                .map(|_| (r.random_range(0..64), r.random_range(0..64)))
                .collect();
            loss_ranking(g, d, z, &pairs)
        }),
    ]
}

/// Gradient check of every graph operation on seeded random 8×8 inputs.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, build))| {
            let mut rng = rng_from(seed, i as u64);
            let mut g = Graph::new();
            let (loss, wrt) = build(&mut g, &mut rng)?;
            let rep = check(&mut g, loss, &wrt, FD_STEP, Coordinates::All)?;
            Ok(CheckResult::new(
                format!("op {name}"),
                rep.rel_err,
                OP_TOLERANCE,
            ))
        })
        .collect()
}

/// Gradient check of every loss with respect to the prediction, 8×8.
pub fn loss_gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    loss_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, build))| {
            let mut rng = rng_from(seed, 100 + i as u64);
            let (z, x, d0) = loss_fixture(&mut rng);
            let mut g = Graph::new();
            let d = g.param(d0);
            let loss = build(&mut g, d, &z, &x, &mut rng)?;
            let rep = check(&mut g, loss, &[d], FD_STEP, Coordinates::All)?;
            Ok(CheckResult::new(
                format!("loss {name}"),
                rep.rel_err,
                OP_TOLERANCE,
            ))
        })
        .collect()
}

/// Gradient of the combined loss through the toy network (2 levels, 4
/// base channels, 16×16, nonzero α) on sampled parameter coordinates.
pub fn toy_net_gradient_check(seed: u64, per_leaf: usize) -> Result<(CheckResult, usize)> {
    let mut rng = rng_from(seed, 200);
    let mut net = Network::<f64>::new(NetConfig::toy(), seed)?;
    for i in net.alpha_indices() {
        net.params_mut()[i].data_mut()[0] = rng.random_range(0.3..0.8);
    }
    let mut g = Graph::new();
    let input = g.input(uniform(&mut rng, vec![1, 5, 16, 16], 0.0, 1.0));
    let fwd = net.forward(&mut g, input, Mode::Train)?;
    let zv: Vec<f64> = (0..256).map(|_| rng.random_range(0.1..1.0)).collect();
    let z = DepthField::new(16, 16, zv, random_mask(&mut rng, 256, 0.9))?;
    let x = z.masked(&random_mask(&mut rng, 256, 0.2));
    let (loss, _) = loss_g2(&mut g, fwd.output, &z, &x, &LossConfig::default())?;
    let rep = check(
        &mut g,
        loss,
        &fwd.params,
        FD_STEP,
        Coordinates::Sample { per_leaf, seed },
    )?;
    Ok((
        CheckResult::new("toy network", rep.rel_err, NET_TOLERANCE),
        rep.checked,
    ))
}

/// Reference metric implementations written as plain loops.
pub mod oracle {
    pub fn label(a: f64, b: f64) -> i32 {
        if a / b >= 1.01 {
            1
        } else if a / b <= 1.0 / 1.01 {
            -1
        } else {
            0
        }
    }

    /// Ordinal error over every pair of valid, positive GT pixels.
    pub fn oe(d: &[f64], z: &[f64], valid: &[bool]) -> f64 {
        let mut pairs = 0u64;
        let mut wrong = 0u64;
        for i in 0..z.len() {
            for j in i + 1..z.len() {
                if valid[i] && valid[j] && z[i] > 0.0 && z[j] > 0.0 {
                    pairs += 1;
                    let di = if d[i] < 1e-6 { 1e-6 } else { d[i] };
                    let dj = if d[j] < 1e-6 { 1e-6 } else { d[j] };
                    if label(di, dj) != label(z[i], z[j]) {
                        wrong += 1;
                    }
                }
            }
        }
        if pairs == 0 {
            0.0
        } else {
            wrong as f64 / pairs as f64
        }
    }

    pub fn srmse(d: &[f64], z: &[f64], valid: &[bool], eps: f64) -> f64 {
        let mut m = 0.0;
        let (mut sd, mut sz) = (0.0, 0.0);
        for i in 0..z.len() {
            if valid[i] {
                m += 1.0;
                sd += d[i];
                sz += z[i];
            }
        }
        if m == 0.0 {
            return 0.0;
        }
        let (md, mz) = (sd / m, sz / m);
        let (mut ad, mut az) = (0.0, 0.0);
        for i in 0..z.len() {
            if valid[i] {
                ad += (d[i] - md).abs();
                az += (z[i] - mz).abs();
            }
        }
        let (ad, az) = (ad / m, az / m);
        let mut acc = 0.0;
        for i in 0..z.len() {
            if valid[i] {
                let e = (d[i] - md) / (ad + eps) - (z[i] - mz) / (az + eps);
                acc += e * e;
            }
        }
        (acc / m).sqrt()
    }

    pub fn rmse(d: &[f64], z: &[f64], valid: &[bool]) -> f64 {
        let mut acc = 0.0;
        let mut m = 0.0;
        for i in 0..z.len() {
            if valid[i] {
                acc += (d[i] - z[i]) * (d[i] - z[i]);
                m += 1.0;
            }
        }
        if m == 0.0 {
            0.0
        } else {
            (acc / m).sqrt()
        }
    }

    pub fn abs_rel(d: &[f64], z: &[f64], valid: &[bool]) -> f64 {
        let mut acc = 0.0;
        let mut m = 0.0;
        for i in 0..z.len() {
            if valid[i] && z[i] > 1e-6 {
                acc += (d[i] - z[i]).abs() / z[i];
                m += 1.0;
            }
        }
        if m == 0.0 {
            0.0
        } else {
            acc / m
        }
    }
}

/// Largest deviation of each metric from its reference over `trials`
/// random 16×16 pairs (GT with holes, predictions that sometimes tie).
pub fn metric_oracle_checks(seed: u64, trials: usize) -> Result<Vec<CheckResult>> {
    let mut worst = [0.0f64; 4];
    for t in 0..trials {
        let mut rng = rng_from(seed, 300 + t as u64);
        let z = DepthField::new(
            16,
            16,
            (0..256).map(|_| rng.random_range(0.05..1.0)).collect(),
            random_mask(&mut rng, 256, 0.8),
        )?;
        let d: Vec<f64> = z
            .values()
            .iter()
            .map(|&v| {
                if rng.random_bool(0.2) {
                    v
                } else {
                    rng.random_range(0.0..1.2)
                }
            })
            .collect();
        let (zv, valid) = (z.values(), z.valid());
        let (oe, pairs) = metric_oe_with_count(&d, &z, DEFAULT_PAIR_COUNT, t as u64);
        debug_assert!(pairs <= DEFAULT_PAIR_COUNT);
        let diffs = [
            (oe - oracle::oe(&d, zv, valid)).abs(),
            (metric_srmse(&d, &z, 1e-6) - oracle::srmse(&d, zv, valid, 1e-6)).abs(),
            (metric_rmse(&d, &z) - oracle::rmse(&d, zv, valid)).abs(),
            (metric_abs(&d, &z) - oracle::abs_rel(&d, zv, valid)).abs(),
        ];
        for (w, v) in worst.iter_mut().zip(diffs) {
            *w = w.max(if v.is_nan() { f64::INFINITY } else { v });
        }
    }
    Ok(["oe", "srmse", "rmse", "abs"]
        .iter()
        .zip(worst)
        .map(|(n, w)| CheckResult::new(format!("metric {n} vs reference"), w, ORACLE_TOLERANCE))
        .collect())
}

/// Everything above with default sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_gradient_checks(seed)?;
    out.extend(loss_gradient_checks(seed)?);
    out.push(toy_net_gradient_check(seed, 16)?.0);
    out.extend(metric_oracle_checks(seed, 100)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_labels_match_hand_examples() {
        assert_eq!(oracle::label(1.005, 1.0), 0);
        assert_eq!(oracle::label(1.02, 1.0), 1);
        assert_eq!(oracle::oe(&[1.005, 1.0], &[1.02, 1.0], &[true, true]), 1.0);
    }

    #[test]
    fn a_wrong_gradient_would_be_caught() {
        // d/dx of x·x checked against the value of x alone
        let mut g = Graph::new();
        let a = g.param(Tensor::from_vec(vec![0.7, -0.4]));
        let s = g.square(a).unwrap();
        let l = g.sum(s).unwrap();
        let rep = check(&mut g, l, &[a], FD_STEP, Coordinates::All).unwrap();
        assert!(rep.rel_err < 1e-8);
        let wrong = crate::autodiff::gradcheck::compare(&[0.7, -0.4], &[1.4, -0.8]);
        assert!(wrong.rel_err > 0.1);
    }
}
