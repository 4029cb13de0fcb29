use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::scalar::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// `½(1 + cos(π·step/total))`; 1 when `total` is 0.
pub fn cosine_factor(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied {
        lr: f64,
    },
    /// A gradient held a non-finite value; nothing changed.
    Skipped,
}

/// Adam with decoupled weight decay and a cosine learning-rate schedule.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    total_steps: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>], total_steps: usize) -> Self {
        Self {
            config,
            total_steps,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Applied updates so far.
    pub fn updates(&self) -> usize {
        self.t as usize
    }

    /// One update at schedule position `step`. `grads[i]` is the gradient
    /// of `params[i]`; `None` counts as zero.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Option<&Tensor<T>>],
        step: usize,
    ) -> StepOutcome {
        assert_eq!(params.len(), grads.len());
        let finite = grads
            .iter()
            .flatten()
            .all(|g| g.data().iter().all(|v| v.is_finite()));
        if !finite {
            log::warn!("step {step}: non-finite gradient, update skipped");
            return StepOutcome::Skipped;
        }
        self.t += 1;
        let c = self.config;
        let lr = c.lr * cosine_factor(step, self.total_steps);
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = lit::<T>(1.0 - c.beta1.powi(self.t));
        let bc2 = lit::<T>(1.0 - c.beta2.powi(self.t));
        let (lr_t, eps, decay) = (
            lit::<T>(lr),
            lit::<T>(c.eps),
            lit::<T>(1.0 - lr * c.weight_decay),
        );
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].map(Tensor::data);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(T::zero(), |g| g[k]);
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        StepOutcome::Applied { lr }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_keeps_parameters() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut opt = AdamW::new(cfg(0.1, 0.0), &p, 10);
        let g = Tensor::from_vec(vec![0.0, 0.0]);
        for s in 0..3 {
            opt.step(&mut p, &[Some(&g)], s);
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::from_vec(vec![1.0])];
        let mut opt = AdamW::new(cfg(0.1, 0.0), &p, 100);
        let g = Tensor::from_vec(vec![1.0]);
        assert_eq!(
            opt.step(&mut p, &[Some(&g)], 0),
            StepOutcome::Applied { lr: 0.1 }
        );
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut p = vec![Tensor::<f64>::from_vec(vec![2.0])];
        let mut opt = AdamW::new(cfg(0.1, 0.5), &p, 0);
        opt.step(&mut p, &[None], 0);
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_factor(0, 50), 1.0);
        assert!((cosine_factor(25, 50) - 0.5).abs() < 1e-15);
        assert!(cosine_factor(50, 50) < 1e-15);
        assert!(cosine_factor(49, 50) < 1e-3);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = vec![Tensor::<f64>::from_vec(vec![1.0])];
        let mut opt = AdamW::new(cfg(0.1, 0.0), &p, 10);
        let g = Tensor::from_vec(vec![f64::NAN]);
        assert_eq!(opt.step(&mut p, &[Some(&g)], 0), StepOutcome::Skipped);
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(opt.updates(), 0);
    }
}
