use rand::Rng;

use crate::error::{Error, Result};
use crate::field::DepthField;
use crate::scalar::Real;
use crate::seed::rng_from;

/// Coverage bounds of a generated hole mask, as a fraction of the frame.
pub const HOLE_COVERAGE: (f64, f64) = (0.01, 0.30);

/// Pixels to invalidate (`true` = hole). Always has at least one hole pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HoleMask {
    height: usize,
    width: usize,
    hole: Vec<bool>,
}

impl HoleMask {
    pub fn new(height: usize, width: usize, hole: Vec<bool>) -> Result<Self> {
        if hole.len() != height * width {
            return Err(Error::invalid(format!(
                "hole mask {height}x{width} needs {} entries, got {}",
                height * width,
                hole.len()
            )));
        }
        if !hole.iter().any(|&h| h) {
            return Err(Error::invalid("hole mask has no hole pixel"));
        }
        Ok(Self {
            height,
            width,
            hole,
        })
    }

    /// Every pixel is a hole.
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            hole: vec![true; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn hole(&self) -> &[bool] {
        &self.hole
    }

    pub fn coverage(&self) -> f64 {
        self.hole.iter().filter(|&&h| h).count() as f64 / self.hole.len() as f64
    }

    fn at(&self, y: usize, x: usize) -> bool {
        self.hole[y * self.width + x]
    }
}

enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn random(rng: &mut impl Rng, h: f64, w: f64) -> Self {
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        let scale = h.min(w);
        let ry = rng.random_range(0.04..0.25) * scale;
        let rx = rng.random_range(0.04..0.25) * scale;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        if rng.random_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            }
        } else {
            // vertices on an ellipse in angular order form a convex polygon
            let k = rng.random_range(3..=7);
            let mut thetas: Vec<f64> = (0..k)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            thetas.sort_by(f64::total_cmp);
            let (s, c) = angle.sin_cos();
            let pts = thetas
                .iter()
                .map(|t| {
                    let (u, v) = (rx * t.cos(), ry * t.sin());
                    (cy + s * u + c * v, cx + c * u - s * v)
                })
                .collect();
            Shape::Polygon(pts)
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                let n = pts.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let (ay, ax) = pts[i];
                    let (by, bx) = pts[(i + 1) % n];
                    let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    if cross != 0.0 {
                        if sign != 0.0 && cross.signum() != sign {
                            return false;
                        }
                        sign = cross.signum();
                    }
                }
                true
            }
        }
    }
}

/// `n` procedural hole masks of size `height × width`, each a union of
/// random ellipses and convex polygons covering 1–30% of the frame.
pub fn synth_hole_masks(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<HoleMask>> {
    if n == 0 {
        return Err(Error::invalid("at least one hole mask must be requested"));
    }
    if height * width < 4 {
        return Err(Error::invalid(format!(
            "hole masks need at least 4 pixels, got {height}x{width}"
        )));
    }
    (0..n as u64)
        .map(|i| synth_one(height, width, seed, i))
        .collect()
}

fn synth_one(height: usize, width: usize, seed: u64, index: u64) -> Result<HoleMask> {
    let mut rng = rng_from(seed, index);
    let total = (height * width) as f64;
    for _ in 0..1000 {
        let mut hole = vec![false; height * width];
        let mut count = 0usize;
        for _ in 0..8 {
            let shape = Shape::random(&mut rng, height as f64, width as f64);
            for y in 0..height {
                for x in 0..width {
                    let i = y * width + x;
                    if !hole[i] && shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        hole[i] = true;
                        count += 1;
                    }
                }
            }
            let cov = count as f64 / total;
            if cov > HOLE_COVERAGE.1 {
                break;
            }
            if cov >= HOLE_COVERAGE.0 {
                return HoleMask::new(height, width, hole);
            }
        }
    }
    Err(Error::Degenerate(format!(
        "could not place a hole in a {height}x{width} frame"
    )))
}

/// Invalidates the pixels under `count` randomly chosen holes. Each hole is
/// randomly cropped, stretched to the frame, rotated, scaled by 0.5–2 and
/// flipped before it is applied. Sampling outside the crop clamps to its
/// edge.
pub fn inject_holes<T: Real>(
    z: &DepthField<T>,
    holes: &[HoleMask],
    count: usize,
    seed: u64,
) -> Result<DepthField<T>> {
    if count == 0 {
        return Ok(z.clone());
    }
    if holes.is_empty() {
        return Err(Error::invalid("no hole masks to inject"));
    }
    let (h, w) = z.dims();
    let mut keep = vec![true; h * w];
    for k in 0..count as u64 {
        let mut rng = rng_from(seed, k);
        let mask = &holes[rng.random_range(0..holes.len())];
        let (mh, mw) = mask.dims();
        let ch = rng.random_range((mh / 2).max(1)..=mh);
        let cw = rng.random_range((mw / 2).max(1)..=mw);
        let oy = rng.random_range(0..=mh - ch);
        let ox = rng.random_range(0..=mw - cw);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let scale = rng.random_range(0.5..2.0);
        let flip_x = rng.random_bool(0.5);
        let flip_y = rng.random_bool(0.5);
        let (s, c) = theta.sin_cos();
        let (hf, wf) = (h as f64, w as f64);
        for y in 0..h {
            for x in 0..w {
                // frame coordinates relative to the centre, undo the similarity
                let u = x as f64 + 0.5 - wf / 2.0;
                let v = y as f64 + 0.5 - hf / 2.0;
                let mut ru = (c * u + s * v) / scale;
                let mut rv = (-s * u + c * v) / scale;
                if flip_x {
                    ru = -ru;
                }
                if flip_y {
                    rv = -rv;
                }
                let sx = ((ru + wf / 2.0) * cw as f64 / wf)
                    .floor()
                    .clamp(0.0, (cw - 1) as f64) as usize;
                let sy = ((rv + hf / 2.0) * ch as f64 / hf)
                    .floor()
                    .clamp(0.0, (ch - 1) as f64) as usize;
                if mask.at(oy + sy, ox + sx) {
                    keep[y * w + x] = false;
                }
            }
        }
    }
    Ok(z.masked(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_respect_coverage_and_seed() {
        let masks = synth_hole_masks(20, 48, 64, 5).unwrap();
        assert_eq!(masks.len(), 20);
        for m in &masks {
            let c = m.coverage();
            assert!((HOLE_COVERAGE.0..=HOLE_COVERAGE.1).contains(&c), "{c}");
        }
        assert_eq!(masks, synth_hole_masks(20, 48, 64, 5).unwrap());
        assert_ne!(masks, synth_hole_masks(20, 48, 64, 6).unwrap());
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(HoleMask::new(2, 2, vec![false; 4]).is_err());
    }

    #[test]
    fn injection_rules() {
        let z = DepthField::dense(16, 16, vec![0.5; 256]).unwrap();
        let masks = synth_hole_masks(4, 16, 16, 1).unwrap();
        assert_eq!(inject_holes(&z, &masks, 0, 3).unwrap(), z);
        assert_eq!(
            inject_holes(&z, &[HoleMask::full(8, 8)], 1, 3)
                .unwrap()
                .valid_count(),
            0
        );
        for seed in 0..20 {
            let out = inject_holes(&z, &masks, 2, seed).unwrap();
            assert!(out.valid_count() <= z.valid_count());
            assert!(out.valid().iter().zip(z.valid()).all(|(&o, &i)| !o || i));
        }
        assert!(inject_holes(&z, &[], 1, 0).is_err());
    }

    #[test]
    fn point_in_convex_polygon() {
        let sq = Shape::Polygon(vec![(0.0, 0.0), (0.0, 2.0), (2.0, 2.0), (2.0, 0.0)]);
        assert!(sq.contains(1.0, 1.0));
        assert!(!sq.contains(3.0, 1.0));
    }
}
