//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough information to run its backward rule. Leaves are either
//! constants ([`Graph::input`]) or trainable parameters ([`Graph::param`]).
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into the trainable leaves; [`Graph::replay`] recomputes every node from
//! the current leaf values, which is what the finite-difference checker in
//! [`gradcheck`] relies on.

mod conv;
pub mod gradcheck;
mod graph;
pub(crate) mod norm;
mod spatial;
mod tensor;

pub use graph::{BinaryOp, Fault, Graph, UnaryOp, Var, DIV_FAULT_THRESHOLD};
pub use spatial::Axis;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected an NCHW tensor, got shape {0:?}")]
    NotNchw(Vec<usize>),
    #[error("shapes {lhs:?} and {rhs:?} are not broadcastable")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("spatial/batch dims differ: {lhs:?} vs {rhs:?}")]
    SpatialMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("unsupported kernel {0}x{1}; only 1x1 and 3x3 are available")]
    UnsupportedKernel(usize, usize),
    #[error("unsupported stride {0}")]
    UnsupportedStride(usize),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("spatial size {h}x{w} must be even")]
    OddSpatial { h: usize, w: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("mask has {got} entries, tensor has {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("batch normalization in training mode needs batch size >= 2, got {0}")]
    BatchTooSmall(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.input(Tensor::from_vec(vec![3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let x = g.input(Tensor::from_vec(vec![-2.0, 0.0, 3.0]));
        let y = g.abs(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 0.0, 3.0]);

        let r = g.input(Tensor::from_vec(vec![-1.0, 0.5]));
        let y = g.relu(r).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.input(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(matches!(
            g.add(a, b),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn tiny_divisor_records_fault() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.input(Tensor::from_vec(vec![1e-13, 2.0]));
        assert!(g.faults().is_empty());
        g.div(a, b).unwrap();
        assert_eq!(g.faults().len(), 1);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.abs(x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let m = g.mean(a).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let mm = g.masked_mean(a, &[true, false, true], 1e-6).unwrap();
        assert!((g.value(mm).item() - 4.0 / (2.0 + 1e-6)).abs() < 1e-15);
        let b = g.input(Tensor::from_vec(vec![5.0]));
        let s = g.masked_sum(b, &[false]).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        let e = g.masked_mean(b, &[false], 1e-6).unwrap();
        assert_eq!(g.value(e).item(), 0.0);
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(vec![1, 1, 1, 1], &[5.0]));
        let w = g.input(t(vec![1, 1, 1, 1], &[1.0]));
        let b = g.input(t(vec![1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), 1).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);

        let grid: Vec<f64> = (0..16).map(f64::from).collect();
        let x = g.input(t(vec![1, 1, 4, 4], &grid));
        let w = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, Some(b), 1).unwrap();
        // center pixel (1,1): window rows 0..3, cols 0..3
        let window: f64 = [0, 1, 2, 4, 5, 6, 8, 9, 10].iter().map(|&i| grid[i]).sum();
        assert_eq!(g.value(y).data()[5], window);
        // corner (0,0) sees only the 2x2 top-left block
        assert_eq!(g.value(y).data()[0], 0.0 + 1.0 + 4.0 + 5.0);

        let y2 = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.value(y2).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn upsample_and_downsample_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let up = g.upsample2(x).unwrap();
        assert_eq!(
            g.value(up).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let l = g.sum(up).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0; 4]);

        let down = g.downsample2(x).unwrap();
        assert_eq!(g.value(down).data(), &[2.5]);
        let c = g.input(Tensor::full(vec![1, 1, 4, 4], 0.7));
        let d = g.downsample2(c).unwrap();
        assert_eq!(g.value(d).shape(), &[1, 1, 2, 2]);
        assert!(g.value(d).data().iter().all(|&v| v == 0.7));

        let odd = g.input(Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(g.downsample2(odd).is_err());
    }

    #[test]
    fn sobel_on_ramps() {
        let mut g = Graph::<f64>::new();
        let ramp_x: Vec<f64> = (0..25).map(|i| (i % 5) as f64).collect();
        let x = g.input(t(vec![1, 1, 5, 5], &ramp_x));
        let (gh, gw) = g.sobel_gradients(x).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(g.value(gw).data()[yy * 5 + xx], 8.0);
                assert_eq!(g.value(gh).data()[yy * 5 + xx], 0.0);
            }
        }
        let ramp_y: Vec<f64> = (0..25).map(|i| (i / 5) as f64).collect();
        let y = g.input(t(vec![1, 1, 5, 5], &ramp_y));
        let (gh, gw) = g.sobel_gradients(y).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(g.value(gh).data()[yy * 5 + xx], 8.0);
                assert_eq!(g.value(gw).data()[yy * 5 + xx], 0.0);
            }
        }
        let c = g.input(Tensor::full(vec![1, 1, 4, 4], 3.0));
        let (gh, gw) = g.sobel_gradients(c).unwrap();
        for i in [5, 6, 9, 10] {
            assert_eq!(g.value(gh).data()[i], 0.0);
            assert_eq!(g.value(gw).data()[i], 0.0);
        }
    }

    #[test]
    fn concat_preserves_order_and_splits_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full(vec![2, 3, 2, 2], 1.0));
        let b = g.param(Tensor::full(vec![2, 2, 2, 2], 2.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 5, 2, 2]);
        let d = g.value(c).data();
        assert!(d[..12].iter().all(|&v| v == 1.0));
        assert!(d[12..20].iter().all(|&v| v == 2.0));
        assert!(d[20..32].iter().all(|&v| v == 1.0));
        let l = g.sum(c).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));

        let bad = g.input(Tensor::zeros(vec![2, 1, 3, 2]));
        assert!(g.concat_channels(a, bad).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let p = g.param(Tensor::from_vec(vec![7.0]));
        let sq = g.square(w).unwrap();
        let loss = g.mean(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0]);
        assert!(g.grad(p).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));

        // accumulation without reset
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);

        assert!(matches!(
            g.backward(sq),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_vec(vec![0.3, -1.2, 2.5]));
        let e = g.exp(w).unwrap();
        let l = g.sum(e).unwrap();
        let l3 = g.mul_scalar(l, 3.0).unwrap();
        g.backward(l).unwrap();
        let base = g.grad(w).unwrap().data().to_vec();
        g.zero_grad();
        g.backward(l3).unwrap();
        for (a, b) in g.grad(w).unwrap().data().iter().zip(&base) {
            assert!((a - 3.0 * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn replay_is_bitwise_reproducible() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(
            vec![1, 2, 4, 4],
            &(0..32).map(|i| (i as f64).sin()).collect::<Vec<_>>(),
        ));
        let w = g.param(t(
            vec![3, 2, 3, 3],
            &(0..54).map(|i| (i as f64 * 0.3).cos()).collect::<Vec<_>>(),
        ));
        let y = g.conv2d(x, w, None, 1).unwrap();
        let r = g.relu(y).unwrap();
        let d = g.downsample2(r).unwrap();
        let s = g.sum(d).unwrap();
        let before: Vec<Vec<f64>> = [y, r, d, s]
            .iter()
            .map(|&v| g.value(v).data().to_vec())
            .collect();
        g.replay().unwrap();
        let after: Vec<Vec<f64>> = [y, r, d, s]
            .iter()
            .map(|&v| g.value(v).data().to_vec())
            .collect();
        for (a, b) in before.iter().zip(&after) {
            assert!(a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn batch_norm_constant_channel_normalizes_to_zero() {
        let mut g = Graph::<f64>::new();
        let mut data = vec![0.0; 2 * 2 * 2 * 2];
        for b in 0..2 {
            for c in 0..2 {
                for i in 0..4 {
                    data[(b * 2 + c) * 4 + i] = 3.0 + c as f64;
                }
            }
        }
        let x = g.input(t(vec![2, 2, 2, 2], &data));
        let gamma = g.input(Tensor::full(vec![2], 1.0));
        let beta = g.input(Tensor::zeros(vec![2]));
        let y = g.batch_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
        let one = g.input(Tensor::zeros(vec![1, 2, 2, 2]));
        assert!(matches!(
            g.batch_norm(one, gamma, beta, 1e-5),
            Err(AutodiffError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn median_picks_middle_values() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![5.0, 1.0, 3.0, 9.0]));
        let m = g.median(x, None).unwrap();
        assert_eq!(g.value(m).item(), 4.0);
        let m2 = g.median(x, Some(&[true, true, true, false])).unwrap();
        assert_eq!(g.value(m2).item(), 3.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5, 0.0, 0.5, 0.0]);
    }
}
