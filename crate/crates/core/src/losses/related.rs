//! Single-regime losses: plain L1/L2 for absolute depth, log-space
//! scale-invariant, median-based affine-invariant, and pairwise ranking.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::DepthField;
use crate::metrics::{ordinal_label, OE_THRESHOLD};
use crate::scalar::{lit, to_f64, Real};

use super::{check_prediction, standardize, Standardization};

/// Floor applied before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-6;

fn residual<T: Real>(g: &mut Graph<T>, d: Var, z: &DepthField<T>) -> Result<Var> {
    check_prediction(g, d, z)?;
    let zt = g.input(z.to_tensor());
    Ok(g.sub(d, zt)?)
}

/// Mean |d − z| over GT-valid pixels (0 when none).
pub fn loss_l1<T: Real>(g: &mut Graph<T>, d: Var, z: &DepthField<T>) -> Result<Var> {
    let r = residual(g, d, z)?;
    let a = g.abs(r)?;
    Ok(g.masked_mean(a, z.valid(), T::zero())?)
}

/// Mean (d − z)² over GT-valid pixels (0 when none).
pub fn loss_l2<T: Real>(g: &mut Graph<T>, d: Var, z: &DepthField<T>) -> Result<Var> {
    let r = residual(g, d, z)?;
    let s = g.square(r)?;
    Ok(g.masked_mean(s, z.valid(), T::zero())?)
}

/// Variance of `Δ = log d − log z` over GT-valid pixels:
/// `(1/M)ΣΔ² − (1/M²)(ΣΔ)²`. Both depths are floored at [`LOG_FLOOR`].
pub fn loss_scale_invariant<T: Real>(g: &mut Graph<T>, d: Var, z: &DepthField<T>) -> Result<Var> {
    check_prediction(g, d, z)?;
    let floor = lit::<T>(LOG_FLOOR);
    let log_z: Vec<T> = z.values().iter().map(|&v| v.max(floor).ln()).collect();
    let log_z = g.input(Tensor::new(vec![1, 1, z.height(), z.width()], log_z)?);
    let dc = g.clamp_min(d, floor)?;
    let log_d = g.log(dc)?;
    let delta = g.sub(log_d, log_z)?;
    let sq = g.square(delta)?;
    let first = g.masked_mean(sq, z.valid(), T::zero())?;
    let mean = g.masked_mean(delta, z.valid(), T::zero())?;
    let second = g.square(mean)?;
    Ok(g.sub(first, second)?)
}

/// Mean absolute difference of the median/median-deviation standardized
/// maps, with statistics over GT-valid pixels.
pub fn loss_affine_invariant<T: Real>(
    g: &mut Graph<T>,
    d: Var,
    z: &DepthField<T>,
    epsilon: T,
) -> Result<Var> {
    check_prediction(g, d, z)?;
    let zt = g.input(z.to_tensor());
    let (sd, _) = standardize(g, d, z.valid(), Standardization::MS, epsilon)?;
    let (sz, _) = standardize(g, zt, z.valid(), Standardization::MS, epsilon)?;
    let r = g.sub(sd, sz)?;
    let a = g.abs(r)?;
    Ok(g.masked_mean(a, z.valid(), T::zero())?)
}

/// Pairwise ordinal loss. Each pair `(i, j)` of flat pixel indices gets a
/// label from the GT ratio (threshold [`OE_THRESHOLD`]); ordered pairs pay
/// `log(1 + exp(−l·(d_i − d_j)))`, equal pairs pay `(d_i − d_j)²`. Pairs
/// touching a GT-invalid pixel are skipped. Returns the mean over the
/// remaining pairs, or 0 if none remain.
pub fn loss_ranking<T: Real>(
    g: &mut Graph<T>,
    d: Var,
    z: &DepthField<T>,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    check_prediction(g, d, z)?;
    let n = z.len();
    let mut ordered = (Vec::new(), Vec::new(), Vec::new());
    let mut equal = (Vec::new(), Vec::new());
    for &(i, j) in pairs {
        if i >= n || j >= n {
            return Err(Error::invalid(format!(
                "pair ({i}, {j}) outside a {n}-pixel field"
            )));
        }
        if !z.valid()[i] || !z.valid()[j] {
            continue;
        }
        match ordinal_label(to_f64(z.values()[i]), to_f64(z.values()[j]), OE_THRESHOLD) {
            0 => {
                equal.0.push(i);
                equal.1.push(j);
            }
            l => {
                ordered.0.push(i);
                ordered.1.push(j);
                ordered.2.push(lit::<T>(-f64::from(l)));
            }
        }
    }
    let used = ordered.0.len() + equal.0.len();
    let mut total = g.input(Tensor::scalar(T::zero()));
    if used == 0 {
        return Ok(total);
    }
    if !ordered.0.is_empty() {
        let di = g.gather(d, &ordered.0)?;
        let dj = g.gather(d, &ordered.1)?;
        let diff = g.sub(di, dj)?;
        let neg_labels = g.input(Tensor::from_vec(ordered.2));
        let t = g.mul(diff, neg_labels)?;
        // softplus(t) = relu(t) + log(1 + exp(-|t|)), stable for large |t|
        let pos = g.relu(t)?;
        let at = g.abs(t)?;
        let nat = g.neg(at)?;
        let e = g.exp(nat)?;
        let e1 = g.add_scalar(e, T::one())?;
        let tail = g.log(e1)?;
        let sp = g.add(pos, tail)?;
        let s = g.sum(sp)?;
        total = g.add(total, s)?;
    }
    if !equal.0.is_empty() {
        let di = g.gather(d, &equal.0)?;
        let dj = g.gather(d, &equal.1)?;
        let diff = g.sub(di, dj)?;
        let sq = g.square(diff)?;
        let s = g.sum(sq)?;
        total = g.add(total, s)?;
    }
    Ok(g.mul_scalar(total, T::one() / lit::<T>(used as f64))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(vals: &[f64]) -> DepthField<f64> {
        DepthField::dense(1, vals.len(), vals.to_vec()).unwrap()
    }

    fn eval(vals: &[f64], f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let d = g.input(Tensor::new(vec![1, 1, 1, vals.len()], vals.to_vec()).unwrap());
        let l = f(&mut g, d).unwrap();
        g.value(l).item()
    }

    #[test]
    fn l1_l2_on_constant_offset() {
        let z = field(&[0.1, 0.4, 0.8, 0.3]);
        let d: Vec<f64> = z.values().iter().map(|v| v + 0.25).collect();
        assert!((eval(&d, |g, d| loss_l1(g, d, &z)) - 0.25).abs() < 1e-15);
        assert!((eval(&d, |g, d| loss_l2(g, d, &z)) - 0.0625).abs() < 1e-15);
        assert_eq!(eval(z.values(), |g, d| loss_l1(g, d, &z)), 0.0);
    }

    #[test]
    fn l1_ignores_invalid_gt() {
        let z = DepthField::new(1, 2, vec![0.5, 0.0], vec![true, false]).unwrap();
        assert_eq!(eval(&[0.5, 9.0], |g, d| loss_l1(g, d, &z)), 0.0);
        let empty = DepthField::empty(1, 2);
        assert_eq!(eval(&[0.5, 9.0], |g, d| loss_l2(g, d, &empty)), 0.0);
    }

    #[test]
    fn scale_invariant_hand_value() {
        let z = field(&[0.3, 0.6]);
        let got = eval(&[0.3, 1.2], |g, d| loss_scale_invariant(g, d, &z));
        let l2 = 2f64.ln();
        assert!((got - l2 * l2 / 4.0).abs() < 1e-15);
        let scaled = eval(&[3.0, 6.0], |g, d| loss_scale_invariant(g, d, &z));
        assert!(scaled.abs() < 1e-12);
    }

    #[test]
    fn affine_invariant_hand_value() {
        let z = field(&[1.0, 2.0, 3.0]);
        let got = eval(&[1.0, 2.0, 4.0], |g, d| {
            loss_affine_invariant(g, d, &z, 1e-12)
        });
        // standardized d = [-1, 0, 2], standardized z = [-1.5, 0, 1.5]
        assert!((got - 1.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn affine_invariant_sweep() {
        let base: Vec<f64> = (0..16)
            .map(|i| 0.5 + 0.4 * ((i as f64) * 1.3).sin())
            .collect();
        let z = field(&base);
        for s in [0.1, 1.0, 10.0] {
            for f in [-5.0, 0.0, 5.0] {
                let d: Vec<f64> = base.iter().map(|v| s * v + f).collect();
                let got = eval(&d, |g, d| loss_affine_invariant(g, d, &z, 1e-9));
                assert!(got <= 1e-6, "s={s} f={f}: {got}");
            }
        }
    }

    #[test]
    fn ranking_examples() {
        let z = field(&[0.5, 0.5, 0.8]);
        // equal GT, equal prediction
        assert_eq!(
            eval(&[0.3, 0.3, 0.0], |g, d| loss_ranking(g, d, &z, &[(0, 1)])),
            0.0
        );
        // ordered GT (z2 > z0), tied prediction
        let tie = eval(&[0.3, 0.3, 0.3], |g, d| loss_ranking(g, d, &z, &[(2, 0)]));
        assert!((tie - 2f64.ln()).abs() < 1e-15);
        // correctly ordered by a wide margin
        let far = eval(&[0.0, 0.0, 60.0], |g, d| loss_ranking(g, d, &z, &[(2, 0)]));
        assert!(far < 1e-20);
        // wrong order by a wide margin stays finite
        let wrong = eval(&[800.0, 0.0, 0.0], |g, d| loss_ranking(g, d, &z, &[(2, 0)]));
        assert!((wrong - 800.0).abs() < 1e-9);
        assert_eq!(
            eval(&[0.1, 0.2, 0.3], |g, d| loss_ranking(g, d, &z, &[])),
            0.0
        );
    }

    #[test]
    fn ranking_rejects_out_of_range_pairs() {
        let z = field(&[0.5, 0.6]);
        let mut g = Graph::new();
        let d = g.input(z.to_tensor());
        assert!(loss_ranking(&mut g, d, &z, &[(0, 2)]).is_err());
    }
}
