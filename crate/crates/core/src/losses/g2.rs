use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::error::Result;
use crate::field::DepthField;
use crate::scalar::{lit, to_f64, Real};

use super::{
    check_prediction, check_same_size, regression_case, standardize, GradientOperator,
    LossBreakdown, LossConfig, Standardization,
};

/// Pyramid levels of the gradient term (full resolution plus three halvings).
pub const SCALE_COUNT: usize = 4;

/// Standardized prediction minus standardized GT, both with statistics over
/// the GT-valid set. Returns `(residual, gt_constant)`.
fn standardized_residual<T: Real>(
    g: &mut Graph<T>,
    d: Var,
    z: &DepthField<T>,
    variant: Standardization,
    eps: T,
) -> Result<(Var, Var)> {
    let zt = g.input(z.to_tensor());
    let (sd, _) = standardize(g, d, z.valid(), variant, eps)?;
    let (sz, _) = standardize(g, zt, z.valid(), variant, eps)?;
    Ok((g.sub(sd, sz)?, zt))
}

fn sa_from_parts<T: Real>(
    g: &mut Graph<T>,
    d: Var,
    residual: Var,
    zt: Var,
    z: &DepthField<T>,
    x: &DepthField<T>,
    eps: T,
) -> Result<Var> {
    let r = g.abs(residual)?;
    let relative = g.masked_mean(r, z.valid(), T::zero())?;
    let anchor_mask: Vec<bool> = x
        .valid()
        .iter()
        .zip(z.valid())
        .map(|(&a, &b)| a && b)
        .collect();
    let e = g.sub(d, zt)?;
    let e = g.abs(e)?;
    let absolute = g.masked_mean(e, &anchor_mask, eps)?;
    Ok(g.add(relative, absolute)?)
}

/// Scale-adaptive term: mean |standardized(d) − standardized(z)| over the
/// GT-valid pixels, plus `Σ|d − z| / (M_V + ε)` over pixels valid in both
/// `x` and `z`.
pub fn loss_sa<T: Real>(
    g: &mut Graph<T>,
    d: Var,
    z: &DepthField<T>,
    x: &DepthField<T>,
    variant: Standardization,
    eps: T,
) -> Result<Var> {
    check_prediction(g, d, z)?;
    check_same_size(z, x)?;
    let (residual, zt) = standardized_residual(g, d, z, variant, eps)?;
    sa_from_parts(g, d, residual, zt, z, x, eps)
}

/// Halves a validity mask: a coarse pixel is valid only if its whole 2×2
/// block is.
fn pool_mask(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(h2 * w2);
    for y in 0..h2 {
        for x in 0..w2 {
            let i = 2 * y * w + 2 * x;
            out.push(mask[i] && mask[i + 1] && mask[i + w] && mask[i + w + 1]);
        }
    }
    out
}

/// Pixels whose full 3×3 neighbourhood lies inside the image and is valid.
fn clean_3x3(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            out[y * w + x] = (0..3).all(|dy| (0..3).all(|dx| mask[(y + dy - 1) * w + x + dx - 1]));
        }
    }
    out
}

/// Pixels whose forward-difference pair along `axis` is inside and valid.
fn clean_pair(mask: &[bool], h: usize, w: usize, axis: Axis) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out[i] = match axis {
                Axis::W => x + 1 < w && mask[i] && mask[i + 1],
                Axis::H => y + 1 < h && mask[i] && mask[i + w],
            };
        }
    }
    out
}

fn sg_from_residual<T: Real>(
    g: &mut Graph<T>,
    residual: Var,
    z: &DepthField<T>,
    operator: GradientOperator,
) -> Result<(Var, usize)> {
    let (mut h, mut w) = z.dims();
    let mut mask = z.valid().to_vec();
    let mask_t = g.input(z.mask_tensor());
    let mut r = g.mul(residual, mask_t)?;
    let min_size = match operator {
        GradientOperator::Sobel => 3,
        GradientOperator::Diff => 2,
    };
    let mut total: Option<Var> = None;
    let mut scales = 0;
    for k in 0..SCALE_COUNT {
        if k > 0 {
            if h % 2 != 0 || w % 2 != 0 {
                break;
            }
            r = g.downsample2(r)?;
            mask = pool_mask(&mask, h, w);
            h /= 2;
            w /= 2;
        }
        if h < min_size || w < min_size {
            break;
        }
        let (gh, gw, clean_h, clean_w) = match operator {
            GradientOperator::Sobel => {
                let (gh, gw) = g.sobel_gradients(r)?;
                let clean = clean_3x3(&mask, h, w);
                (gh, gw, clean.clone(), clean)
            }
            GradientOperator::Diff => (
                g.forward_diff(r, Axis::H)?,
                g.forward_diff(r, Axis::W)?,
                clean_pair(&mask, h, w, Axis::H),
                clean_pair(&mask, h, w, Axis::W),
            ),
        };
        let ah = g.abs(gh)?;
        let th = g.masked_mean(ah, &clean_h, T::zero())?;
        let aw = g.abs(gw)?;
        let tw = g.masked_mean(aw, &clean_w, T::zero())?;
        let term = g.add(th, tw)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
        scales += 1;
    }
    if scales < SCALE_COUNT {
        log::warn!(
            "gradient term: {}x{} input supports only {scales} of {SCALE_COUNT} scales",
            z.height(),
            z.width()
        );
    }
    let total = match total {
        Some(t) => t,
        None => g.input(Tensor::scalar(T::zero())),
    };
    Ok((total, scales))
}

/// Multi-scale gradient-matching term on the standardized residual. The
/// residual is zeroed at GT-invalid pixels, pooled 2×2 per scale, and
/// derivative outputs whose support touches an invalid or out-of-image
/// pixel are excluded; each scale is normalized by its clean-pixel count.
pub fn loss_sg<T: Real>(
    g: &mut Graph<T>,
    d: Var,
    z: &DepthField<T>,
    variant: Standardization,
    eps: T,
    operator: GradientOperator,
) -> Result<Var> {
    check_prediction(g, d, z)?;
    let (residual, _) = standardized_residual(g, d, z, variant, eps)?;
    Ok(sg_from_residual(g, residual, z, operator)?.0)
}

/// Combined objective `sa + λ·sg` and its breakdown.
pub fn loss_g2<T: Real>(
    g: &mut Graph<T>,
    d: Var,
    z: &DepthField<T>,
    x: &DepthField<T>,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    check_prediction(g, d, z)?;
    check_same_size(z, x)?;
    let eps = lit::<T>(config.epsilon);
    let (residual, zt) = standardized_residual(g, d, z, config.standardization, eps)?;
    let sa = sa_from_parts(g, d, residual, zt, z, x, eps)?;
    let (sg, scales_used) = sg_from_residual(g, residual, z, config.operator)?;
    let weighted = g.mul_scalar(sg, lit(config.lambda))?;
    let total = g.add(sa, weighted)?;
    let case = regression_case(x);
    let breakdown = LossBreakdown {
        total: to_f64(g.value(total).item()),
        sa_term: to_f64(g.value(sa).item()),
        sg_term: to_f64(g.value(sg).item()),
        lambda: config.lambda,
        case: case.case,
        valid_count: case.valid_count,
        distinct_count: case.distinct_count,
        scales_used,
    };
    Ok((total, breakdown))
}
