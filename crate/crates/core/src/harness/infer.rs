use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{DepthField, RgbField};
use crate::io::{read_depth, read_rgb, write_depth};
use crate::net::Network;

use super::eval::input_scale;

/// Nearest multiple of `div` to `n` (ties round up), or an error when `n`
/// is below `div`.
pub fn inference_size(n: usize, div: usize) -> Result<usize> {
    if n < div {
        return Err(Error::invalid(format!(
            "input size {n} is below the minimum {div}"
        )));
    }
    Ok((n + div / 2) / div * div)
}

/// Predicts depth for an RGB image and optional raw depth. Inputs are
/// resized to the nearest size the network accepts and the prediction is
/// resized back (nearest), clamped at 0. Without X the network runs with
/// no valid input depth. X is divided by its largest valid value before
/// the network sees it and the prediction is multiplied back, so output
/// depth is in the units of X (normalized units when X is absent).
pub fn infer(
    net: &Network<f64>,
    rgb: &RgbField<f64>,
    x: Option<&DepthField<f64>>,
) -> Result<DepthField<f64>> {
    let (h, w) = rgb.dims();
    if let Some(x) = x {
        if x.dims() != (h, w) {
            return Err(Error::SizeMismatch {
                expected: (h, w),
                got: x.dims(),
            });
        }
    }
    let div = net.config().size_divisor();
    let (nh, nw) = (inference_size(h, div)?, inference_size(w, div)?);
    let rgb_n = rgb.resize_bilinear(nh, nw);
    let (x_n, scale) = match x {
        Some(x) => {
            let s = input_scale(x, 1.0);
            (x.resize_nearest(nh, nw).scaled(1.0 / s), s)
        }
        None => (DepthField::empty(nh, nw), 1.0),
    };
    let pred = net.predict(&rgb_n, &x_n)?;
    let pred = DepthField::dense(
        nh,
        nw,
        pred.into_iter().map(|v| (v * scale).max(0.0)).collect(),
    )?;
    Ok(pred.resize_nearest(h, w))
}

pub fn infer_files(ckpt: &Path, rgb: &Path, x: Option<&Path>, out: &Path) -> Result<()> {
    let net = Network::<f64>::load(ckpt)?;
    let rgb = read_rgb(rgb)?;
    let x = x.map(read_depth).transpose()?;
    let d = infer(&net, &rgb, x.as_ref())?;
    write_depth(out, &d)
}
