//! Per-plane spatial kernels over NCHW data. Each forward has a matching
//! adjoint used by the backward pass.

use crate::scalar::{lit, Real};

/// Spatial axis of a finite-difference operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Vertical (row index, `h`).
    H,
    /// Horizontal (column index, `w`).
    W,
}

pub(crate) fn upsample2<T: Real>(planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * h2 * w2..(p + 1) * h2 * w2];
        for yy in 0..h2 {
            let row = &src[(yy / 2) * w..(yy / 2 + 1) * w];
            for (xx, v) in dst[yy * w2..(yy + 1) * w2].iter_mut().enumerate() {
                *v = row[xx / 2];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sums each 2×2 block. `h`, `w` are the small dims.
pub(crate) fn upsample2_adjoint<T: Real>(planes: usize, h: usize, w: usize, gy: &[T]) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for yy in 0..h2 {
            for xx in 0..w2 {
                dst[(yy / 2) * w + xx / 2] += src[yy * w2 + xx];
            }
        }
    }
    gx
}

/// 2×2 average pooling; `h`, `w` are the input dims and must be even.
pub(crate) fn downsample2<T: Real>(planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = lit::<T>(0.25);
    let mut y = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * h2 * w2..(p + 1) * h2 * w2];
        for yy in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * yy * w + 2 * xx;
                dst[yy * w2 + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    y
}

pub(crate) fn downsample2_adjoint<T: Real>(planes: usize, h: usize, w: usize, gy: &[T]) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = lit::<T>(0.25);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = src[(yy / 2) * w2 + xx / 2] * quarter;
            }
        }
    }
    gx
}

/// Sobel kernel for `axis`, indexed `[dy][dx]` as a cross-correlation.
pub(crate) fn sobel_kernel(axis: Axis) -> [[f64; 3]; 3] {
    let kw = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    match axis {
        Axis::W => kw,
        Axis::H => {
            let mut kh = [[0.0; 3]; 3];
            for (i, row) in kw.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    kh[j][i] = v;
                }
            }
            kh
        }
    }
}

pub(crate) fn sobel<T: Real>(axis: Axis, planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let k = sobel_kernel(axis).map(|r| r.map(lit::<T>));
    let mut y = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for (dy, krow) in k.iter().enumerate() {
                    let iy = yy as isize + dy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for (dx, &kv) in krow.iter().enumerate() {
                        let ix = xx as isize + dx as isize - 1;
                        if ix < 0 || ix >= w as isize || kv == T::zero() {
                            continue;
                        }
                        acc += kv * src[iy as usize * w + ix as usize];
                    }
                }
                dst[yy * w + xx] = acc;
            }
        }
    }
    y
}

pub(crate) fn sobel_adjoint<T: Real>(
    axis: Axis,
    planes: usize,
    h: usize,
    w: usize,
    gy: &[T],
) -> Vec<T> {
    let k = sobel_kernel(axis).map(|r| r.map(lit::<T>));
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * h * w..(p + 1) * h * w];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let g = src[yy * w + xx];
                if g == T::zero() {
                    continue;
                }
                for (dy, krow) in k.iter().enumerate() {
                    let iy = yy as isize + dy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for (dx, &kv) in krow.iter().enumerate() {
                        let ix = xx as isize + dx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += kv * g;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Forward difference `x[i+1] - x[i]` along `axis`; the last row/column is 0.
pub(crate) fn forward_diff<T: Real>(
    axis: Axis,
    planes: usize,
    h: usize,
    w: usize,
    x: &[T],
) -> Vec<T> {
    let mut y = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let i = yy * w + xx;
                dst[i] = match axis {
                    Axis::W if xx + 1 < w => src[i + 1] - src[i],
                    Axis::H if yy + 1 < h => src[i + w] - src[i],
                    _ => T::zero(),
                };
            }
        }
    }
    y
}

pub(crate) fn forward_diff_adjoint<T: Real>(
    axis: Axis,
    planes: usize,
    h: usize,
    w: usize,
    gy: &[T],
) -> Vec<T> {
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * h * w..(p + 1) * h * w];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let i = yy * w + xx;
                let step = match axis {
                    Axis::W if xx + 1 < w => 1,
                    Axis::H if yy + 1 < h => w,
                    _ => continue,
                };
                dst[i + step] += src[i];
                dst[i] -= src[i];
            }
        }
    }
    gx
}

/// Channel concatenation of `(n, ca, hw)` and `(n, cb, hw)` flattened blocks.
pub(crate) fn concat<T: Real>(n: usize, a_len: usize, b_len: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut y = Vec::with_capacity(n * (a_len + b_len));
    for i in 0..n {
        y.extend_from_slice(&a[i * a_len..(i + 1) * a_len]);
        y.extend_from_slice(&b[i * b_len..(i + 1) * b_len]);
    }
    y
}

pub(crate) fn concat_split<T: Real>(
    n: usize,
    a_len: usize,
    b_len: usize,
    gy: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut ga = Vec::with_capacity(n * a_len);
    let mut gb = Vec::with_capacity(n * b_len);
    for chunk in gy.chunks(a_len + b_len) {
        ga.extend_from_slice(&chunk[..a_len]);
        gb.extend_from_slice(&chunk[a_len..]);
    }
    (ga, gb)
}
