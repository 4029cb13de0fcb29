use serde::{Deserialize, Serialize};

use crate::augment::{sparsify, training_size};
use crate::error::{Error, Result};
use crate::field::{DepthField, RgbField};
use crate::io::Sample;
use crate::metrics::{compute_metrics, MetricConfig, MetricReport};
use crate::net::{assemble_input, stack_batch, Network};
use crate::seed::split_seed;

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Fractions of GT pixels kept in X, strictly increasing.
    pub sparsity_levels: Vec<f64>,
    pub metrics: MetricConfig,
    pub seed: u64,
    /// Height test pairs are resized to.
    pub target_height: usize,
    /// Depth unit assumed when X has no valid pixel.
    pub fallback_scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sparsity_levels: vec![0.0, 0.001, 0.01, 0.1, 1.0],
            metrics: MetricConfig::default(),
            seed: 0,
            target_height: 64,
            fallback_scale: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.sparsity_levels;
        if l.is_empty()
            || l.iter().any(|v| !(0.0..=1.0).contains(v))
            || l.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid(format!(
                "sparsity levels {l:?} must be non-empty, within [0, 1] and strictly increasing"
            )));
        }
        if !(self.fallback_scale > 0.0 && self.fallback_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "fallback_scale must be positive, got {}",
                self.fallback_scale
            )));
        }
        Ok(())
    }
}

/// Metrics at one sparsity level, averaged over the test samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub sparsity: f64,
    pub samples: usize,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub levels: Vec<LevelReport>,
}

impl EvalTable {
    pub fn rmse(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.metrics.rmse).collect()
    }

    pub fn srmse(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.metrics.srmse).collect()
    }
}

/// Anything that maps RGB + X to a dense prediction.
pub trait DepthPredictor {
    fn predict_batch(&self, items: &[(&RgbField<f64>, &DepthField<f64>)]) -> Result<Vec<Vec<f64>>>;

    /// Whether X must be divided by its largest valid value before
    /// prediction (and the prediction multiplied back).
    fn wants_unit_depth(&self) -> bool {
        true
    }
}

impl DepthPredictor for Network<f64> {
    fn predict_batch(&self, items: &[(&RgbField<f64>, &DepthField<f64>)]) -> Result<Vec<Vec<f64>>> {
        let inputs = items
            .iter()
            .map(|(rgb, x)| assemble_input(rgb, x))
            .collect::<Result<Vec<_>>>()?;
        let out = self.predict_tensor(stack_batch(&inputs)?)?;
        let per = out.numel() / items.len();
        Ok(out.data().chunks(per).map(<[f64]>::to_vec).collect())
    }
}

/// Copies X and fills invalid pixels from the nearest valid one (ties go
/// to the lowest index); all zeros when X is empty.
#[derive(Clone, Copy, Debug, Default)]
pub struct NearestFill;

impl NearestFill {
    pub fn fill(x: &DepthField<f64>) -> Vec<f64> {
        let (h, w) = x.dims();
        let seeds: Vec<usize> = (0..h * w).filter(|&i| x.valid()[i]).collect();
        if seeds.is_empty() {
            return vec![0.0; h * w];
        }
        // multi-source BFS in index order gives a deterministic nearest seed
        let mut src = vec![usize::MAX; h * w];
        let mut queue = std::collections::VecDeque::new();
        for &s in &seeds {
            src[s] = s;
            queue.push_back(s);
        }
        while let Some(i) = queue.pop_front() {
            let (y, xx) = (i / w, i % w);
            let nbrs = [
                (y > 0).then(|| i - w),
                (xx > 0).then(|| i - 1),
                (xx + 1 < w).then(|| i + 1),
                (y + 1 < h).then(|| i + w),
            ];
            for j in nbrs.into_iter().flatten() {
                if src[j] == usize::MAX {
                    src[j] = src[i];
                    queue.push_back(j);
                }
            }
        }
        src.iter().map(|&s| x.values()[s]).collect()
    }
}

impl DepthPredictor for NearestFill {
    fn predict_batch(&self, items: &[(&RgbField<f64>, &DepthField<f64>)]) -> Result<Vec<Vec<f64>>> {
        Ok(items.iter().map(|(_, x)| Self::fill(x)).collect())
    }

    fn wants_unit_depth(&self) -> bool {
        false
    }
}

/// Resizes each test pair to `target_height` (RGB bilinear, GT nearest).
/// Depth keeps its units.
pub fn prepare_eval_set(
    samples: &[Sample],
    target_height: usize,
) -> Result<Vec<(RgbField<f64>, DepthField<f64>)>> {
    samples
        .iter()
        .map(|s| {
            let (h, w) = s.rgb.dims();
            if h == 0 || w == 0 || s.gt.dims() != (h, w) {
                return Err(Error::invalid(format!(
                    "sample {} has inconsistent or empty size",
                    s.id
                )));
            }
            let (th, tw) = training_size(h, w, target_height);
            Ok((s.rgb.resize_bilinear(th, tw), s.gt.resize_nearest(th, tw)))
        })
        .collect()
}

/// Depth unit of one input: its largest valid value, or `fallback`.
pub fn input_scale(x: &DepthField<f64>, fallback: f64) -> f64 {
    x.max_valid().filter(|&m| m > 0.0).unwrap_or(fallback)
}

/// For each sparsity level, draws X by sparsifying GT, predicts, clamps
/// predictions at 0 and averages the metrics over the samples. Predictors
/// that want unit depth get X divided by [`input_scale`] and their output
/// multiplied back, so metrics are in the units of GT and nothing about GT
/// leaks into the input beyond X itself.
pub fn evaluate(
    predictor: &dyn DepthPredictor,
    set: &[(RgbField<f64>, DepthField<f64>)],
    config: &EvalConfig,
) -> Result<EvalTable> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let mut levels = Vec::with_capacity(config.sparsity_levels.len());
    for (li, &level) in config.sparsity_levels.iter().enumerate() {
        let level_seed = split_seed(config.seed, li as u64);
        let xs = set
            .iter()
            .enumerate()
            .map(|(si, (_, gt))| sparsify(gt, level, split_seed(level_seed, si as u64)))
            .collect::<Result<Vec<_>>>()?;
        let scales: Vec<f64> = if predictor.wants_unit_depth() {
            xs.iter()
                .map(|x| input_scale(x, config.fallback_scale))
                .collect()
        } else {
            vec![1.0; xs.len()]
        };
        let inputs: Vec<DepthField<f64>> = xs
            .iter()
            .zip(&scales)
            .map(|(x, &s)| {
                if s == 1.0 {
                    x.clone()
                } else {
                    x.scaled(1.0 / s)
                }
            })
            .collect();
        let mut sum = [0.0f64; 4];
        let (mut pixels, mut pairs) = (0, 0);
        for start in (0..set.len()).step_by(EVAL_BATCH) {
            let end = (start + EVAL_BATCH).min(set.len());
            let items: Vec<_> = (start..end).map(|i| (&set[i].0, &inputs[i])).collect();
            let preds = predictor.predict_batch(&items)?;
            for (k, mut d) in preds.into_iter().enumerate() {
                let si = start + k;
                let gt = &set[si].1;
                d.iter_mut().for_each(|v| *v = (*v * scales[si]).max(0.0));
                let mc = MetricConfig {
                    seed: split_seed(config.metrics.seed, si as u64),
                    ..config.metrics
                };
                let r = compute_metrics(&d, gt, &mc);
                for (acc, v) in sum.iter_mut().zip([r.oe, r.srmse, r.rmse, r.abs_rel]) {
                    *acc += v;
                }
                pixels += r.pixel_count;
                pairs += r.pair_count;
            }
        }
        let n = set.len() as f64;
        levels.push(LevelReport {
            sparsity: level,
            samples: set.len(),
            metrics: MetricReport {
                oe: sum[0] / n,
                srmse: sum[1] / n,
                rmse: sum[2] / n,
                abs_rel: sum[3] / n,
                pixel_count: pixels,
                pair_count: pairs,
            },
        });
    }
    Ok(EvalTable { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_split;

    fn test_set(n: usize) -> Vec<(RgbField<f64>, DepthField<f64>)> {
        generate_split(n, 11, 32, 32)
            .unwrap()
            .into_iter()
            .map(|s| (s.rgb, s.depth))
            .collect()
    }

    #[test]
    fn nearest_fill_copies_valid_pixels() {
        let x = DepthField::new(
            1,
            4,
            vec![0.0, 0.5, 0.0, 0.0],
            vec![false, true, false, false],
        )
        .unwrap();
        assert_eq!(NearestFill::fill(&x), vec![0.5; 4]);
        assert_eq!(NearestFill::fill(&DepthField::empty(2, 2)), vec![0.0; 4]);
    }

    #[test]
    fn oracle_is_exact_at_full_density_and_degrades_with_sparsity() {
        let set = test_set(6);
        let table = evaluate(&NearestFill, &set, &EvalConfig::default()).unwrap();
        let rmse = table.rmse();
        assert_eq!(table.levels.len(), 5);
        assert_eq!(rmse[4], 0.0);
        assert!(rmse.windows(2).all(|w| w[0] >= w[1]), "{rmse:?}");
        let levels: Vec<f64> = table.levels.iter().map(|l| l.sparsity).collect();
        assert_eq!(levels, EvalConfig::default().sparsity_levels);
    }

    #[test]
    fn levels_must_increase() {
        let cfg = EvalConfig {
            sparsity_levels: vec![0.1, 0.01],
            ..EvalConfig::default()
        };
        assert!(evaluate(&NearestFill, &test_set(1), &cfg).is_err());
    }

    #[test]
    fn network_batches_match_single_predictions() {
        use crate::net::NetConfig;
        let net = Network::<f64>::new(NetConfig::toy(), 2).unwrap();
        let set = test_set(3);
        let xs: Vec<_> = set
            .iter()
            .map(|(_, gt)| sparsify(gt, 0.1, 1).unwrap())
            .collect();
        let items: Vec<_> = set.iter().zip(&xs).map(|((rgb, _), x)| (rgb, x)).collect();
        let batched = net.predict_batch(&items).unwrap();
        for (k, (rgb, x)) in items.iter().enumerate() {
            let single = net.predict(rgb, x).unwrap();
            let diff = single
                .iter()
                .zip(&batched[k])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12);
        }
    }
}
