//! im2col convolution kernels (zero padding, square kernels).

use crate::scalar::Real;

use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize) -> Result<Self, AutodiffError> {
        let [n, c, h, w] = *input else {
            return Err(AutodiffError::NotNchw(input.to_vec()));
        };
        let [o, wc, kh, kw] = *weight else {
            return Err(AutodiffError::NotNchw(weight.to_vec()));
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(AutodiffError::UnsupportedKernel(kh, kw));
        }
        if wc != c {
            return Err(AutodiffError::ChannelMismatch {
                expected: wc,
                got: c,
            });
        }
        if !(stride == 1 || stride == 2) {
            return Err(AutodiffError::UnsupportedStride(stride));
        }
        if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(AutodiffError::OddSpatial { h, w });
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad: (kh - 1) / 2,
            ho: h / stride,
            wo: w / stride,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (kk, p) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * p;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let yn = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (o, row) in yn.chunks_mut(p).enumerate() {
                row.fill(b[o]);
            }
        }
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        T::gemm(g.o, kk, p, weight, false, cols, false, yn, bias.is_some());
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (kk, p) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * p;
    let mut dx = want.0.then(|| vec![T::zero(); g.n * in_len]);
    let mut dw = want.1.then(|| vec![T::zero(); g.o * kk]);
    let mut db = want.2.then(|| vec![T::zero(); g.o]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];
    let mut dcol = vec![
        T::zero();
        if want.0 && !g.is_pointwise() {
            kk * p
        } else {
            0
        }
    ];
    for n in 0..g.n {
        let gy = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (o, row) in gy.chunks(p).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut col);
                &col
            };
            T::gemm(g.o, p, kk, gy, false, cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(kk, g.o, p, weight, true, gy, false, dxn, true);
            } else {
                T::gemm(kk, g.o, p, weight, true, gy, false, &mut dcol, false);
                col2im(g, &dcol, dxn);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
