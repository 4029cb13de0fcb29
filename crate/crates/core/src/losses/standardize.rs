use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::scalar::{lit, Real};

use super::Standardization;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardizeStats<T> {
    pub center: T,
    pub spread: T,
    pub epsilon: T,
}

/// `(a − center) / (spread + ε)` with statistics taken over `domain`.
///
/// Values outside `domain` are transformed with the same statistics but
/// carry no meaning; callers mask them. An empty domain yields an all-zero
/// map with zero statistics.
pub fn standardize<T: Real>(
    g: &mut Graph<T>,
    a: Var,
    domain: &[bool],
    variant: Standardization,
    epsilon: T,
) -> Result<(Var, StandardizeStats<T>)> {
    let count = domain.iter().filter(|&&m| m).count();
    if count == 0 {
        let zeros = g.mul_scalar(a, T::zero())?;
        return Ok((
            zeros,
            StandardizeStats {
                center: T::zero(),
                spread: T::zero(),
                epsilon,
            },
        ));
    }
    let inv_count = T::one() / lit::<T>(count as f64);
    let center = match variant {
        Standardization::G2S | Standardization::ZS => {
            let s = g.masked_sum(a, domain)?;
            g.mul_scalar(s, inv_count)?
        }
        Standardization::MS => g.median(a, Some(domain))?,
    };
    let centered = g.sub(a, center)?;
    let spread = match variant {
        Standardization::G2S | Standardization::MS => {
            let dev = g.abs(centered)?;
            let s = g.masked_sum(dev, domain)?;
            g.mul_scalar(s, inv_count)?
        }
        Standardization::ZS => {
            let sq = g.square(centered)?;
            let s = g.masked_sum(sq, domain)?;
            let var = g.mul_scalar(s, inv_count)?;
            g.sqrt(var)?
        }
    };
    let denom = g.add_scalar(spread, epsilon)?;
    let out = g.div(centered, denom)?;
    let stats = StandardizeStats {
        center: g.value(center).item(),
        spread: g.value(spread).item(),
        epsilon,
    };
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    /// Direct formula evaluation, independent of the graph.
    fn oracle(a: &[f64], variant: Standardization, eps: f64) -> Vec<f64> {
        let n = a.len() as f64;
        let center = match variant {
            Standardization::MS => {
                let mut s = a.to_vec();
                s.sort_by(|x, y| x.partial_cmp(y).unwrap());
                let m = s.len();
                if m % 2 == 1 {
                    s[m / 2]
                } else {
                    0.5 * (s[m / 2 - 1] + s[m / 2])
                }
            }
            _ => a.iter().sum::<f64>() / n,
        };
        let spread = match variant {
            Standardization::ZS => (a.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n).sqrt(),
            _ => a.iter().map(|v| (v - center).abs()).sum::<f64>() / n,
        };
        a.iter().map(|v| (v - center) / (spread + eps)).collect()
    }

    fn run(
        a: &[f64],
        mask: &[bool],
        variant: Standardization,
        eps: f64,
    ) -> (Vec<f64>, StandardizeStats<f64>) {
        let mut g = Graph::new();
        let v = g.input(Tensor::from_vec(a.to_vec()));
        let (out, stats) = standardize(&mut g, v, mask, variant, eps).unwrap();
        (g.value(out).data().to_vec(), stats)
    }

    #[test]
    fn g2s_hand_example() {
        let (out, stats) = run(&[1.0, 2.0, 3.0], &[true; 3], Standardization::G2S, 1e-15);
        assert_eq!(stats.center, 2.0);
        assert!((stats.spread - 2.0 / 3.0).abs() < 1e-15);
        for (o, e) in out.iter().zip([-1.5, 0.0, 1.5]) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_formula_for_every_variant() {
        let a: Vec<f64> = (0..17).map(|i| ((i * 7 % 11) as f64).sqrt()).collect();
        for variant in [
            Standardization::G2S,
            Standardization::ZS,
            Standardization::MS,
        ] {
            let (out, _) = run(&a, &vec![true; a.len()], variant, 1e-6);
            for (o, e) in out.iter().zip(oracle(&a, variant, 1e-6)) {
                assert!((o - e).abs() < 1e-12, "{variant:?}");
            }
        }
    }

    #[test]
    fn constant_field_maps_to_zero() {
        for variant in [
            Standardization::G2S,
            Standardization::ZS,
            Standardization::MS,
        ] {
            let (out, _) = run(&[0.4; 9], &[true; 9], variant, 1e-6);
            assert!(out.iter().all(|&v| v.abs() < 1e-9), "{variant:?}");
        }
    }

    #[test]
    fn empty_domain_gives_zeros() {
        let (out, stats) = run(&[1.0, 5.0], &[false, false], Standardization::G2S, 1e-6);
        assert_eq!(out, vec![0.0, 0.0]);
        assert_eq!((stats.center, stats.spread), (0.0, 0.0));
    }

    #[test]
    fn affine_map_changes_output_only_through_epsilon() {
        let a: Vec<f64> = (0..64)
            .map(|i| ((i as f64) * 0.37).sin() * 0.5 + 0.5)
            .collect();
        let b: Vec<f64> = a.iter().map(|v| 10.0 * v + 3.0).collect();
        let mask = vec![true; a.len()];
        let (sa, _) = run(&a, &mask, Standardization::G2S, 1e-6);
        let (sb, _) = run(&b, &mask, Standardization::G2S, 1e-6);
        let worst = sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn variants_agree_on_symmetric_two_value_fields() {
        // mean = median and |x - center| is constant, so MAD = std.
        let a = [0.2, 0.8, 0.2, 0.8, 0.8, 0.2];
        let mask = [true; 6];
        let (g2s, _) = run(&a, &mask, Standardization::G2S, 1e-6);
        let (zs, _) = run(&a, &mask, Standardization::ZS, 1e-6);
        let (ms, _) = run(&a, &mask, Standardization::MS, 1e-6);
        for i in 0..6 {
            assert!((g2s[i] - zs[i]).abs() < 1e-12);
            assert!((g2s[i] - ms[i]).abs() < 1e-12);
        }
    }
}
