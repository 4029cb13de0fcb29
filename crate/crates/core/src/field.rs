//! Image-shaped data: depth maps with validity masks and RGB images.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// H×W depth map plus a validity mask. Invalid pixels always store 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthField<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Real> DepthField<T> {
    /// Builds a field; values at invalid pixels are zeroed. Valid values
    /// must be finite and non-negative.
    pub fn new(height: usize, width: usize, mut values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if values.len() != n || valid.len() != n {
            return Err(Error::invalid(format!(
                "depth field {height}x{width} needs {n} values and mask entries, got {} and {}",
                values.len(),
                valid.len()
            )));
        }
        for (v, &ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = T::zero();
            } else if !v.is_finite() || *v < T::zero() {
                return Err(Error::invalid(format!(
                    "valid depth must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    /// Fully valid field.
    pub fn dense(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        Self::new(height, width, values, vec![true; height * width])
    }

    /// Field with no valid pixel.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![T::zero(); height * width],
            valid: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.valid.len() as f64
        }
    }

    /// Largest valid value, if any pixel is valid.
    pub fn max_valid(&self) -> Option<T> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v)
            .fold(None, |m, v| Some(m.map_or(v, |m: T| m.max(v))))
    }

    /// Values as a `(1, 1, H, W)` tensor (invalid pixels are 0).
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![1, 1, self.height, self.width], self.values.clone())
            .expect("consistent field size")
    }

    /// Validity mask as a `(1, 1, H, W)` 0/1 tensor.
    pub fn mask_tensor(&self) -> Tensor<T> {
        let data = self
            .valid
            .iter()
            .map(|&v| if v { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![1, 1, self.height, self.width], data).expect("consistent field size")
    }

    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        values: Vec<T>,
        valid: Vec<bool>,
    ) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
            valid,
        }
    }

    /// Multiplies every valid value by `s`.
    pub fn scaled(&self, s: T) -> Self {
        let values = self.values.iter().map(|&v| v * s).collect();
        Self::from_parts_unchecked(self.height, self.width, values, self.valid.clone())
    }

    /// Keeps the values but drops validity where `keep` is false.
    pub fn masked(&self, keep: &[bool]) -> Self {
        let valid: Vec<bool> = self.valid.iter().zip(keep).map(|(&a, &b)| a && b).collect();
        let values = self
            .values
            .iter()
            .zip(&valid)
            .map(|(&v, &ok)| if ok { v } else { T::zero() })
            .collect();
        Self::from_parts_unchecked(self.height, self.width, values, valid)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = self.values.clone();
        let mut valid = self.valid.clone();
        for (row_v, row_m) in values
            .chunks_mut(self.width)
            .zip(valid.chunks_mut(self.width))
        {
            row_v.reverse();
            row_m.reverse();
        }
        Self::from_parts_unchecked(self.height, self.width, values, valid)
    }

    /// Nearest-neighbour resampling of values and mask.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let mut values = Vec::with_capacity(height * width);
        let mut valid = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = nearest_index(y, height, self.height);
            for x in 0..width {
                let sx = nearest_index(x, width, self.width);
                let i = sy * self.width + sx;
                values.push(self.values[i]);
                valid.push(self.valid[i]);
            }
        }
        Self::from_parts_unchecked(height, width, values, valid)
    }

    pub fn cast<U: Real>(&self) -> DepthField<U> {
        DepthField {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| U::from(v).expect("castable"))
                .collect(),
            valid: self.valid.clone(),
        }
    }
}

pub(crate) fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize).min(src_len - 1)
}

/// H×W×3 color image, interleaved, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbField<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> RgbField<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "rgb field {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar `[R, G, B]` copies of the channels (CHW order).
    pub fn planes(&self) -> Vec<T> {
        let n = self.height * self.width;
        let mut out = vec![T::zero(); 3 * n];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(3 * self.width) {
            let w = self.width;
            for x in 0..w / 2 {
                for c in 0..3 {
                    row.swap(3 * x + c, 3 * (w - 1 - x) + c);
                }
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let coord = |d: usize, dst: usize, src: usize| -> (usize, usize, T) {
            let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, lit(s - lo as f64))
        };
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            let (y0, y1, fy) = coord(y, height, self.height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, width, self.width);
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| self.data[3 * (yy * self.width + xx) + c];
                    let top = at(y0, x0) * (T::one() - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (T::one() - fx) + at(y1, x1) * fx;
                    data.push(top * (T::one() - fy) + bottom * fy);
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> RgbField<U> {
        RgbField {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("castable"))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_pixels_are_zeroed() {
        let f = DepthField::new(1, 3, vec![1.0, 2.0, 3.0], vec![true, false, true]).unwrap();
        assert_eq!(f.values(), &[1.0, 0.0, 3.0]);
        assert_eq!(f.valid_count(), 2);
        assert!(DepthField::new(1, 1, vec![-1.0], vec![true]).is_err());
        assert!(DepthField::new(1, 1, vec![-1.0], vec![false]).is_ok());
    }

    #[test]
    fn resize_and_flip() {
        let f = DepthField::dense(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let big = f.resize_nearest(4, 4);
        assert_eq!(big.get(0, 0), 1.0);
        assert_eq!(big.get(3, 3), 4.0);
        assert_eq!(big.resize_nearest(2, 2), f);
        assert_eq!(f.flip_horizontal().values(), &[2.0, 1.0, 4.0, 3.0]);

        let rgb = RgbField::new(1, 2, vec![0.0, 0.1, 0.2, 1.0, 0.9, 0.8]).unwrap();
        assert_eq!(rgb.flip_horizontal().pixel(0, 0), [1.0, 0.9, 0.8]);
        let c = RgbField::new(2, 2, vec![0.5; 12])
            .unwrap()
            .resize_bilinear(4, 6);
        assert!(c.data().iter().all(|&v| (v - 0.5f64).abs() < 1e-15));
    }
}
