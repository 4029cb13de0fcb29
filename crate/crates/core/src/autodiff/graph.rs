use std::cmp::Ordering;

use crate::scalar::{lit, Real};

use super::conv::{self, ConvGeom};
use super::norm;
use super::spatial::{self, Axis};
use super::{AutodiffError, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    /// Subgradient 0 at exactly 0.
    Abs,
    Relu,
    Log,
    Square,
    /// Gradient taken as 0 where the output is 0.
    Sqrt,
    Exp,
    Neg,
}

/// Divisors smaller than this in magnitude are recorded as faults.
pub const DIV_FAULT_THRESHOLD: f64 = 1e-12;

/// A numerical hazard noticed while recording; the value is still produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Fault {
    pub node: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary {
        op: BinaryOp,
        lhs: Var,
        rhs: Var,
    },
    Unary {
        op: UnaryOp,
        input: Var,
    },
    Affine {
        input: Var,
        scale: T,
        offset: T,
    },
    ClampMin {
        input: Var,
        floor: T,
    },
    /// `scale · Σ wᵢ xᵢ` (all weights 1 when absent).
    Reduce {
        input: Var,
        weights: Option<Vec<T>>,
        scale: T,
    },
    Median {
        input: Var,
        mask: Option<Vec<bool>>,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Slice {
        input: Var,
        offset: usize,
        shape: Vec<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Upsample2 {
        input: Var,
    },
    Downsample2 {
        input: Var,
    },
    Sobel {
        input: Var,
        axis: Axis,
    },
    ForwardDiff {
        input: Var,
        axis: Axis,
    },
    Concat {
        lhs: Var,
        rhs: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    ChannelAffine {
        input: Var,
        scale: Vec<T>,
        shift: Vec<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the node list is already topologically sorted.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    faults: Vec<Fault>,
}

fn broadcast_shape(a: &[usize], an: usize, b: &[usize], bn: usize) -> Option<Vec<usize>> {
    if a == b || bn == 1 {
        Some(a.to_vec())
    } else if an == 1 {
        Some(b.to_vec())
    } else {
        None
    }
}

fn median_picks<T: Real>(x: &[T], mask: Option<&[bool]>) -> Vec<(usize, T)> {
    let mut sel: Vec<(T, usize)> = x
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(i, &v)| (v, i))
        .collect();
    if sel.is_empty() {
        return Vec::new();
    }
    sel.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let n = sel.len();
    if n % 2 == 1 {
        vec![(sel[n / 2].1, T::one())]
    } else {
        let half = lit::<T>(0.5);
        vec![(sel[n / 2 - 1].1, half), (sel[n / 2].1, half)]
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            faults: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf; its gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: trainable,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a trainable leaf (None until a backward pass).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn faults(&self) -> &[Fault] {
        &self.faults
    }

    /// Overwrites a leaf's value. Call [`Graph::replay`] to refresh dependents.
    pub fn set_value(&mut self, v: Var, value: Tensor<T>) -> Result<(), AutodiffError> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(AutodiffError::NotALeaf(v.0));
        }
        if node.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Recomputes every non-leaf node from its recorded inputs.
    pub fn replay(&mut self) -> Result<(), AutodiffError> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.compute(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>) -> Result<Var, AutodiffError> {
        let value = self.compute(&op)?;
        let requires_grad = self
            .inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Binary { lhs, rhs, .. } | Op::Concat { lhs, rhs } => vec![*lhs, *rhs],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Unary { input, .. }
            | Op::Affine { input, .. }
            | Op::ClampMin { input, .. }
            | Op::Reduce { input, .. }
            | Op::Median { input, .. }
            | Op::Gather { input, .. }
            | Op::Slice { input, .. }
            | Op::Upsample2 { input }
            | Op::Downsample2 { input }
            | Op::Sobel { input, .. }
            | Op::ForwardDiff { input, .. }
            | Op::ChannelAffine { input, .. } => vec![*input],
        }
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn compute(&self, op: &Op<T>) -> Result<Tensor<T>, AutodiffError> {
        let out = match op {
            Op::Leaf => unreachable!("leaves are not computed"),
            Op::Binary { op, lhs, rhs } => {
                let (a, b) = (self.val(*lhs), self.val(*rhs));
                let shape = broadcast_shape(a.shape(), a.numel(), b.shape(), b.numel())
                    .ok_or_else(|| AutodiffError::ShapeMismatch {
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    })?;
                let n: usize = shape.iter().product();
                let (ad, bd) = (a.data(), b.data());
                let (sa, sb) = (ad.len() > 1, bd.len() > 1);
                let f = |x: T, y: T| match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                };
                let data = (0..n)
                    .map(|i| f(ad[if sa { i } else { 0 }], bd[if sb { i } else { 0 }]))
                    .collect();
                Tensor::new(shape, data)?
            }
            Op::Unary { op, input } => {
                let a = self.val(*input);
                let data = a
                    .data()
                    .iter()
                    .map(|&x| match op {
                        UnaryOp::Abs => x.abs(),
                        UnaryOp::Relu => x.max(T::zero()),
                        UnaryOp::Log => x.ln(),
                        UnaryOp::Square => x * x,
                        UnaryOp::Sqrt => x.sqrt(),
                        UnaryOp::Exp => x.exp(),
                        UnaryOp::Neg => -x,
                    })
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Affine {
                input,
                scale,
                offset,
            } => {
                let a = self.val(*input);
                let data = a.data().iter().map(|&x| x * *scale + *offset).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::ClampMin { input, floor } => {
                let a = self.val(*input);
                let data = a.data().iter().map(|&x| x.max(*floor)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Reduce {
                input,
                weights,
                scale,
            } => {
                let a = self.val(*input).data();
                let s: T = match weights {
                    Some(w) => a.iter().zip(w).map(|(&x, &m)| x * m).sum(),
                    None => a.iter().copied().sum(),
                };
                Tensor::scalar(s * *scale)
            }
            Op::Median { input, mask } => {
                let a = self.val(*input).data();
                let v = median_picks(a, mask.as_deref())
                    .into_iter()
                    .map(|(i, w)| a[i] * w)
                    .fold(T::zero(), |acc, x| acc + x);
                Tensor::scalar(v)
            }
            Op::Gather { input, indices } => {
                let a = self.val(*input).data();
                Tensor::from_vec(indices.iter().map(|&i| a[i]).collect())
            }
            Op::Slice {
                input,
                offset,
                shape,
            } => {
                let len: usize = shape.iter().product();
                let a = self.val(*input).data();
                Tensor::new(shape.clone(), a[*offset..*offset + len].to_vec())?
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (x, w) = (self.val(*input), self.val(*weight));
                let geom = ConvGeom::new(x.shape(), w.shape(), *stride)?;
                let b = bias.map(|b| self.val(b).data());
                Tensor::new(
                    geom.output_shape(),
                    conv::forward(&geom, x.data(), w.data(), b),
                )?
            }
            Op::Upsample2 { input } => {
                let x = self.val(*input);
                let (n, c, h, w) = x.dims4()?;
                Tensor::new(
                    vec![n, c, 2 * h, 2 * w],
                    spatial::upsample2(n * c, h, w, x.data()),
                )?
            }
            Op::Downsample2 { input } => {
                let x = self.val(*input);
                let (n, c, h, w) = x.dims4()?;
                Tensor::new(
                    vec![n, c, h / 2, w / 2],
                    spatial::downsample2(n * c, h, w, x.data()),
                )?
            }
            Op::Sobel { input, axis } => {
                let x = self.val(*input);
                let (n, c, h, w) = x.dims4()?;
                Tensor::new(
                    x.shape().to_vec(),
                    spatial::sobel(*axis, n * c, h, w, x.data()),
                )?
            }
            Op::ForwardDiff { input, axis } => {
                let x = self.val(*input);
                let (n, c, h, w) = x.dims4()?;
                Tensor::new(
                    x.shape().to_vec(),
                    spatial::forward_diff(*axis, n * c, h, w, x.data()),
                )?
            }
            Op::Concat { lhs, rhs } => {
                let (a, b) = (self.val(*lhs), self.val(*rhs));
                let (n, ca, h, w) = a.dims4()?;
                let (_, cb, _, _) = b.dims4()?;
                let data = spatial::concat(n, ca * h * w, cb * h * w, a.data(), b.data());
                Tensor::new(vec![n, ca + cb, h, w], data)?
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let x = self.val(*input);
                let (n, c, h, w) = x.dims4()?;
                let data = norm::forward(
                    (n, c, h * w),
                    x.data(),
                    self.val(*gamma).data(),
                    self.val(*beta).data(),
                    *eps,
                );
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::ChannelAffine {
                input,
                scale,
                shift,
            } => {
                let x = self.val(*input);
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let mut data = x.data().to_vec();
                for b in 0..n {
                    for ch in 0..c {
                        for v in &mut data[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            *v = *v * scale[ch] + shift[ch];
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
        };
        Ok(out)
    }

    // ---- recording API ----

    pub fn binary(&mut self, op: BinaryOp, lhs: Var, rhs: Var) -> Result<Var, AutodiffError> {
        if op == BinaryOp::Div {
            let tiny = lit::<T>(DIV_FAULT_THRESHOLD);
            if self.val(rhs).data().iter().any(|d| d.abs() < tiny) {
                self.faults.push(Fault {
                    node: self.nodes.len(),
                    message: format!("divisor magnitude below {DIV_FAULT_THRESHOLD:e}"),
                });
            }
        }
        self.push(Op::Binary { op, lhs, rhs })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Unary { op, input: a })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(UnaryOp::Neg, a)
    }

    /// `a · scale + offset` with constant scalars.
    pub fn affine(&mut self, a: Var, scale: T, offset: T) -> Result<Var, AutodiffError> {
        self.push(Op::Affine {
            input: a,
            scale,
            offset,
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var, AutodiffError> {
        self.affine(a, T::one(), c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var, AutodiffError> {
        self.affine(a, c, T::zero())
    }

    /// `max(a, floor)`; gradient is 0 where clamped.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Result<Var, AutodiffError> {
        self.push(Op::ClampMin { input: a, floor })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Reduce {
            input: a,
            weights: None,
            scale: T::one(),
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.val(a).numel().max(1);
        self.push(Op::Reduce {
            input: a,
            weights: None,
            scale: T::one() / lit::<T>(n as f64),
        })
    }

    fn mask_weights(&self, a: Var, mask: &[bool]) -> Result<Vec<T>, AutodiffError> {
        if mask.len() != self.val(a).numel() {
            return Err(AutodiffError::MaskLength {
                expected: self.val(a).numel(),
                got: mask.len(),
            });
        }
        Ok(mask
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect())
    }

    /// Sum over the pixels where `mask` is set.
    pub fn masked_sum(&mut self, a: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let weights = self.mask_weights(a, mask)?;
        self.push(Op::Reduce {
            input: a,
            weights: Some(weights),
            scale: T::one(),
        })
    }

    /// Masked sum divided by `count + eps`. With `eps = 0` and an empty mask
    /// the result is 0.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool], eps: T) -> Result<Var, AutodiffError> {
        let weights = self.mask_weights(a, mask)?;
        let count = lit::<T>(mask.iter().filter(|&&m| m).count() as f64);
        let denom = count + eps;
        let scale = if denom > T::zero() {
            T::one() / denom
        } else {
            T::zero()
        };
        self.push(Op::Reduce {
            input: a,
            weights: Some(weights),
            scale,
        })
    }

    /// Median over the masked entries (mean of the two middle values for an
    /// even count, 0 when empty). Gradient flows to the selected entries.
    pub fn median(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, AutodiffError> {
        if let Some(m) = mask {
            self.mask_weights(a, m)?;
        }
        self.push(Op::Median {
            input: a,
            mask: mask.map(<[bool]>::to_vec),
        })
    }

    /// Flat-index gather into a rank-1 tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let n = self.val(a).numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: n });
        }
        self.push(Op::Gather {
            input: a,
            indices: indices.to_vec(),
        })
    }

    /// Batch item `index` of an NCHW tensor as a `(1, C, H, W)` tensor.
    pub fn batch_item(&mut self, a: Var, index: usize) -> Result<Var, AutodiffError> {
        let (n, c, h, w) = self.val(a).dims4()?;
        if index >= n {
            return Err(AutodiffError::IndexOutOfRange { index, len: n });
        }
        self.push(Op::Slice {
            input: a,
            offset: index * c * h * w,
            shape: vec![1, c, h, w],
        })
    }

    /// Zero-padded cross-correlation with 1×1 or 3×3 kernels, stride 1 or 2.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        let geom = ConvGeom::new(self.val(input).shape(), self.val(weight).shape(), stride)?;
        if let Some(b) = bias {
            if self.val(b).numel() != geom.o {
                return Err(AutodiffError::ShapeMismatch {
                    lhs: vec![geom.o],
                    rhs: self.val(b).shape().to_vec(),
                });
            }
        }
        self.push(Op::Conv2d {
            input,
            weight,
            bias,
            stride,
        })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.val(a).dims4()?;
        self.push(Op::Upsample2 { input: a })
    }

    /// 2×2 average pooling; spatial dims must be even.
    pub fn downsample2(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (_, _, h, w) = self.val(a).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::OddSpatial { h, w });
        }
        self.push(Op::Downsample2 { input: a })
    }

    pub fn sobel(&mut self, a: Var, axis: Axis) -> Result<Var, AutodiffError> {
        self.val(a).dims4()?;
        self.push(Op::Sobel { input: a, axis })
    }

    /// Unnormalized Sobel responses `(∇h, ∇w)` with zero padding.
    pub fn sobel_gradients(&mut self, a: Var) -> Result<(Var, Var), AutodiffError> {
        let gh = self.sobel(a, Axis::H)?;
        let gw = self.sobel(a, Axis::W)?;
        Ok((gh, gw))
    }

    pub fn forward_diff(&mut self, a: Var, axis: Axis) -> Result<Var, AutodiffError> {
        self.val(a).dims4()?;
        self.push(Op::ForwardDiff { input: a, axis })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (na, _, ha, wa) = self.val(a).dims4()?;
        let (nb, _, hb, wb) = self.val(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(AutodiffError::SpatialMismatch {
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        self.push(Op::Concat { lhs: a, rhs: b })
    }

    /// Training-mode batch normalization with per-channel batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, AutodiffError> {
        let (n, c, _, _) = self.val(x).dims4()?;
        if n < 2 {
            return Err(AutodiffError::BatchTooSmall(n));
        }
        for p in [gamma, beta] {
            if self.val(p).numel() != c {
                return Err(AutodiffError::ChannelMismatch {
                    expected: c,
                    got: self.val(p).numel(),
                });
            }
        }
        self.push(Op::BatchNorm {
            input: x,
            gamma,
            beta,
            eps,
        })
    }

    /// Per-channel `x · scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(
        &mut self,
        x: Var,
        scale: Vec<T>,
        shift: Vec<T>,
    ) -> Result<Var, AutodiffError> {
        let (_, c, _, _) = self.val(x).dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(AutodiffError::ChannelMismatch {
                expected: c,
                got: scale.len().min(shift.len()),
            });
        }
        self.push(Op::ChannelAffine {
            input: x,
            scale,
            shift,
        })
    }

    // ---- backward ----

    /// Accumulates `∂loss/∂p` into every trainable leaf `p` reachable from
    /// `loss`. Repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if !self.val(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(
                self.val(loss).shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, x) in acc.data_mut().iter_mut().zip(&g) {
                            *a += *x;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
            } else {
                self.propagate(idx, &g, &mut grads)?;
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(contribution) {
                    *a += x;
                }
            }
            None => grads[v.0] = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<(), AutodiffError> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Binary { op, lhs, rhs } => {
                let (a, b) = (self.val(*lhs).data(), self.val(*rhs).data());
                let (sa, sb) = (a.len() > 1, b.len() > 1);
                let n = g.len();
                let at = |i: usize| a[if sa { i } else { 0 }];
                let bt = |i: usize| b[if sb { i } else { 0 }];
                let reduce = |full: Vec<T>, keep: bool| -> Vec<T> {
                    if keep {
                        full
                    } else {
                        vec![full.into_iter().sum()]
                    }
                };
                if self.wants(*lhs) {
                    let ga: Vec<T> = (0..n)
                        .map(|i| match op {
                            BinaryOp::Add | BinaryOp::Sub => g[i],
                            BinaryOp::Mul => g[i] * bt(i),
                            BinaryOp::Div => g[i] / bt(i),
                        })
                        .collect();
                    self.send(grads, *lhs, reduce(ga, sa || n == 1));
                }
                if self.wants(*rhs) {
                    let gb: Vec<T> = (0..n)
                        .map(|i| match op {
                            BinaryOp::Add => g[i],
                            BinaryOp::Sub => -g[i],
                            BinaryOp::Mul => g[i] * at(i),
                            BinaryOp::Div => -g[i] * at(i) / (bt(i) * bt(i)),
                        })
                        .collect();
                    self.send(grads, *rhs, reduce(gb, sb || n == 1));
                }
            }
            Op::Unary { op, input } => {
                let x = self.val(*input).data();
                let y = out.data();
                let two = lit::<T>(2.0);
                let gx = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gi, (&xi, &yi))| match op {
                        UnaryOp::Abs => {
                            if xi > T::zero() {
                                gi
                            } else if xi < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Relu => {
                            if xi > T::zero() {
                                gi
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Log => gi / xi,
                        UnaryOp::Square => gi * two * xi,
                        UnaryOp::Sqrt => {
                            if yi > T::zero() {
                                gi / (two * yi)
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Exp => gi * yi,
                        UnaryOp::Neg => -gi,
                    })
                    .collect();
                self.send(grads, *input, gx);
            }
            Op::Affine { input, scale, .. } => {
                self.send(grads, *input, g.iter().map(|&x| x * *scale).collect());
            }
            Op::ClampMin { input, floor } => {
                let x = self.val(*input).data();
                let gx = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > *floor { gi } else { T::zero() })
                    .collect();
                self.send(grads, *input, gx);
            }
            Op::Reduce {
                input,
                weights,
                scale,
            } => {
                let n = self.val(*input).numel();
                let s = g[0] * *scale;
                let gx = match weights {
                    Some(w) => w.iter().map(|&m| m * s).collect(),
                    None => vec![s; n],
                };
                self.send(grads, *input, gx);
            }
            Op::Median { input, mask } => {
                let x = self.val(*input).data();
                let mut gx = vec![T::zero(); x.len()];
                for (i, w) in median_picks(x, mask.as_deref()) {
                    gx[i] += w * g[0];
                }
                self.send(grads, *input, gx);
            }
            Op::Gather { input, indices } => {
                let mut gx = vec![T::zero(); self.val(*input).numel()];
                for (&i, &gi) in indices.iter().zip(g) {
                    gx[i] += gi;
                }
                self.send(grads, *input, gx);
            }
            Op::Slice { input, offset, .. } => {
                let mut gx = vec![T::zero(); self.val(*input).numel()];
                gx[*offset..*offset + g.len()].copy_from_slice(g);
                self.send(grads, *input, gx);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (x, w) = (self.val(*input), self.val(*weight));
                let geom = ConvGeom::new(x.shape(), w.shape(), *stride)?;
                let want_b = bias.is_some_and(|b| self.wants(b));
                let cg = conv::backward(
                    &geom,
                    x.data(),
                    w.data(),
                    g,
                    (self.wants(*input), self.wants(*weight), want_b),
                );
                if let Some(gx) = cg.input {
                    self.send(grads, *input, gx);
                }
                if let Some(gw) = cg.weight {
                    self.send(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    self.send(grads, *b, gb);
                }
            }
            Op::Upsample2 { input } => {
                let (n, c, h, w) = self.val(*input).dims4()?;
                self.send(grads, *input, spatial::upsample2_adjoint(n * c, h, w, g));
            }
            Op::Downsample2 { input } => {
                let (n, c, h, w) = self.val(*input).dims4()?;
                self.send(grads, *input, spatial::downsample2_adjoint(n * c, h, w, g));
            }
            Op::Sobel { input, axis } => {
                let (n, c, h, w) = self.val(*input).dims4()?;
                self.send(grads, *input, spatial::sobel_adjoint(*axis, n * c, h, w, g));
            }
            Op::ForwardDiff { input, axis } => {
                let (n, c, h, w) = self.val(*input).dims4()?;
                self.send(
                    grads,
                    *input,
                    spatial::forward_diff_adjoint(*axis, n * c, h, w, g),
                );
            }
            Op::Concat { lhs, rhs } => {
                let (n, ca, h, w) = self.val(*lhs).dims4()?;
                let (_, cb, _, _) = self.val(*rhs).dims4()?;
                let (ga, gb) = spatial::concat_split(n, ca * h * w, cb * h * w, g);
                self.send(grads, *lhs, ga);
                self.send(grads, *rhs, gb);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let x = self.val(*input);
                let (n, c, h, w) = x.dims4()?;
                let (gx, ggamma, gbeta) =
                    norm::backward((n, c, h * w), x.data(), self.val(*gamma).data(), *eps, g);
                self.send(grads, *input, gx);
                self.send(grads, *gamma, ggamma);
                self.send(grads, *beta, gbeta);
            }
            Op::ChannelAffine { input, scale, .. } => {
                let (n, c, h, w) = self.val(*input).dims4()?;
                let hw = h * w;
                let mut gx = g.to_vec();
                for b in 0..n {
                    for ch in 0..c {
                        for v in &mut gx[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            *v *= scale[ch];
                        }
                    }
                }
                self.send(grads, *input, gx);
            }
        }
        Ok(())
    }
}
