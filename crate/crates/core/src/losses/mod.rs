//! Differentiable depth losses.
//!
//! The main objective combines a scale-adaptive term (standardized L1 over
//! GT-valid pixels plus an absolute L1 anchored at pixels where the raw
//! input `x` is valid) with a multi-scale gradient-matching term on the
//! standardized residual. The related single-regime losses (L1/L2,
//! log-space scale-invariant, median affine-invariant, pairwise ranking)
//! live in [`related`].
//!
//! Every loss takes the prediction as a `(1, 1, H, W)` graph variable and
//! the targets as [`DepthField`]s of the same size.

mod case;
mod g2;
pub mod related;
mod standardize;

use serde::{Deserialize, Serialize};

pub use case::{regression_case, CaseReport, RegressionCase, DISTINCT_VALUE_RESOLUTION};
pub use g2::{loss_g2, loss_sa, loss_sg, SCALE_COUNT};
pub use related::{loss_affine_invariant, loss_l1, loss_l2, loss_ranking, loss_scale_invariant};
pub use standardize::{standardize, StandardizeStats};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::DepthField;
use crate::scalar::Real;

/// Default stabilizer in normalized depth units.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Default weight of the gradient term.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Center/spread pair used to standardize a depth map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Standardization {
    /// Mean and mean absolute deviation.
    #[default]
    G2S,
    /// Mean and standard deviation (z-score).
    ZS,
    /// Median and mean absolute deviation from the median.
    MS,
}

/// Spatial derivative used by the gradient term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientOperator {
    #[default]
    Sobel,
    /// Forward differences.
    Diff,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub standardization: Standardization,
    pub operator: GradientOperator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            standardization: Standardization::G2S,
            operator: GradientOperator::Sobel,
        }
    }
}

/// Per-term values of one evaluation of the combined loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sa_term: f64,
    pub sg_term: f64,
    pub lambda: f64,
    pub case: RegressionCase,
    pub valid_count: usize,
    pub distinct_count: usize,
    /// Pyramid levels the gradient term could actually use.
    pub scales_used: usize,
}

pub(crate) fn check_prediction<T: Real>(g: &Graph<T>, d: Var, z: &DepthField<T>) -> Result<()> {
    let shape = g.value(d).shape();
    if shape != [1, 1, z.height(), z.width()] {
        return Err(Error::invalid(format!(
            "prediction shape {shape:?} does not match target {}x{}",
            z.height(),
            z.width()
        )));
    }
    Ok(())
}

pub(crate) fn check_same_size<T: Real>(a: &DepthField<T>, b: &DepthField<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::SizeMismatch {
            expected: a.dims(),
            got: b.dims(),
        });
    }
    Ok(())
}
