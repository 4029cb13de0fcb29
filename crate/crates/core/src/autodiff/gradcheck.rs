//! Central finite-difference checker for recorded graphs.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{lit, to_f64, Real};

use super::{AutodiffError, Graph, Var};

/// Which coordinates of each checked leaf get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// At most `per_leaf` seeded random coordinates per leaf.
    Sample {
        per_leaf: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, 0 when both vanish.
    pub rel_err: f64,
}

/// Compares analytic gradients of `loss` w.r.t. `wrt` against central
/// differences with step `h`. The graph is left with its original values
/// and with freshly computed gradients.
pub fn check<T: Real>(
    g: &mut Graph<T>,
    loss: Var,
    wrt: &[Var],
    h: f64,
    coords: Coordinates,
) -> Result<GradCheckReport, AutodiffError> {
    g.zero_grad();
    g.backward(loss)?;
    let step = lit::<T>(h);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, &v) in wrt.iter().enumerate() {
        let base = g.value(v).clone();
        let grad: Vec<f64> = match g.grad(v) {
            Some(t) => t.data().iter().map(|&x| to_f64(x)).collect(),
            None => vec![0.0; base.numel()],
        };
        let idx: Vec<usize> = match coords {
            Coordinates::All => (0..base.numel()).collect(),
            Coordinates::Sample { per_leaf, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                let mut s = sample(&mut rng, base.numel(), per_leaf.min(base.numel())).into_vec();
                s.sort_unstable();
                s
            }
        };
        for i in idx {
            let mut probe = base.clone();
            probe.data_mut()[i] = base.data()[i] + step;
            g.set_value(v, probe.clone())?;
            g.replay()?;
            let plus = to_f64(g.value(loss).item());
            probe.data_mut()[i] = base.data()[i] - step;
            g.set_value(v, probe)?;
            g.replay()?;
            let minus = to_f64(g.value(loss).item());
            numeric.push((plus - minus) / (2.0 * h));
            analytic.push(grad[i]);
        }
        g.set_value(v, base)?;
    }
    g.replay()?;
    Ok(compare(&analytic, &numeric))
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    GradCheckReport {
        checked: analytic.len(),
        max_abs_err: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        rel_err: if scale == 0.0 {
            0.0
        } else {
            norm(&diff) / scale
        },
    }
}
