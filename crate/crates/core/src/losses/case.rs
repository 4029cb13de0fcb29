use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::field::DepthField;
use crate::scalar::{to_f64, Real};

/// Quantization step used when counting distinct valid values.
pub const DISTINCT_VALUE_RESOLUTION: f64 = 1e-6;

/// Which part of depth the raw input can pin down.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegressionCase {
    /// No valid input value: depth is known only up to scale and shift.
    Affine,
    /// One distinct value: shift is fixed, scale is not.
    Scale,
    /// Two or more distinct values: absolute depth.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: RegressionCase,
    pub valid_count: usize,
    pub distinct_count: usize,
}

/// Counts valid pixels and distinct valid values of `x` and classifies the
/// regression regime.
pub fn regression_case<T: Real>(x: &DepthField<T>) -> CaseReport {
    let mut distinct = BTreeSet::new();
    let mut valid_count = 0;
    for (&v, &ok) in x.values().iter().zip(x.valid()) {
        if ok {
            valid_count += 1;
            distinct.insert((to_f64(v) / DISTINCT_VALUE_RESOLUTION).round() as i64);
        }
    }
    let distinct_count = distinct.len();
    let case = match distinct_count {
        0 => RegressionCase::Affine,
        1 => RegressionCase::Scale,
        _ => RegressionCase::Direct,
    };
    CaseReport {
        case,
        valid_count,
        distinct_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_affine() {
        let r = regression_case(&DepthField::<f64>::empty(4, 4));
        assert_eq!(
            (r.case, r.valid_count, r.distinct_count),
            (RegressionCase::Affine, 0, 0)
        );
    }

    #[test]
    fn single_value_is_scale() {
        let x = DepthField::dense(10, 10, vec![0.5; 100]).unwrap();
        let r = regression_case(&x);
        assert_eq!(
            (r.case, r.valid_count, r.distinct_count),
            (RegressionCase::Scale, 100, 1)
        );
    }

    #[test]
    fn two_values_are_direct() {
        let x = DepthField::new(1, 3, vec![0.2, 0.7, 0.9], vec![true, true, false]).unwrap();
        let r = regression_case(&x);
        assert_eq!(
            (r.case, r.valid_count, r.distinct_count),
            (RegressionCase::Direct, 2, 2)
        );
    }

    #[test]
    fn rounding_noise_does_not_add_values() {
        let x = DepthField::dense(1, 3, vec![0.3, 0.1 + 0.2, 0.3 + 1e-12]).unwrap();
        assert_eq!(regression_case(&x).distinct_count, 1);
    }
}
