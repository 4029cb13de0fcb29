//! Procedural RGB-D scenes: a ground plane and far wall plus z-buffered
//! rectangles, tilted planes and spheres, in metres.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DepthField, RgbField};
use crate::seed::{rng_from, split_seed};

/// Depth band a scene is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Band {
    /// 1–10 m.
    Indoor,
    /// 10–100 m.
    Outdoor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub band: Band,
    pub depth_range: (f64, f64),
    pub primitive_count: usize,
    pub height: usize,
    pub width: usize,
}

impl SceneSpec {
    /// Draws range and primitive count for a scene of the given band.
    pub fn sample(seed: u64, band: Band, height: usize, width: usize) -> Self {
        let mut rng = rng_from(seed, 0);
        let (min, max) = match band {
            Band::Indoor => {
                let min = rng.random_range(1.0..3.0);
                (min, rng.random_range(min + 3.0..=10.0))
            }
            Band::Outdoor => {
                let min = rng.random_range(10.0..30.0);
                (min, rng.random_range(min + 30.0..=100.0))
            }
        };
        Self {
            seed,
            band,
            depth_range: (min, max),
            primitive_count: rng.random_range(3..=8),
            height,
            width,
        }
    }
}

/// A generated scene. `labels` names the surface seen at each pixel: 0 is
/// the ground, 1 the far wall, `k + 2` the k-th primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub rgb: RgbField<f64>,
    pub depth: DepthField<f64>,
    pub labels: Vec<u32>,
}

enum Primitive {
    Rect {
        y0: f64,
        y1: f64,
        x0: f64,
        x1: f64,
        depth: f64,
    },
    Tilted {
        y0: f64,
        y1: f64,
        x0: f64,
        x1: f64,
        depth: f64,
        gy: f64,
        gx: f64,
    },
    Sphere {
        cy: f64,
        cx: f64,
        radius: f64,
        depth: f64,
        bulge: f64,
    },
}

impl Primitive {
    fn random(rng: &mut impl Rng, h: f64, w: f64, min: f64, max: f64) -> Self {
        let depth = rng.random_range(min..min + 0.9 * (max - min));
        let size = h.min(w);
        match rng.random_range(0..3) {
            0 | 1 => {
                let rh = rng.random_range(0.1..0.45) * h;
                let rw = rng.random_range(0.1..0.45) * w;
                let y0 = rng.random_range(-0.1 * h..h - rh);
                let x0 = rng.random_range(-0.1 * w..w - rw);
                let (y1, x1) = (y0 + rh, x0 + rw);
                if rng.random_bool(0.5) {
                    Primitive::Rect {
                        y0,
                        y1,
                        x0,
                        x1,
                        depth,
                    }
                } else {
                    let span = 0.3 * (max - min);
                    Primitive::Tilted {
                        y0,
                        y1,
                        x0,
                        x1,
                        depth,
                        gy: rng.random_range(-span..span) / h,
                        gx: rng.random_range(-span..span) / w,
                    }
                }
            }
            _ => {
                let radius = rng.random_range(0.08..0.25) * size;
                Primitive::Sphere {
                    cy: rng.random_range(0.0..h),
                    cx: rng.random_range(0.0..w),
                    radius,
                    depth,
                    bulge: rng.random_range(0.05..0.3) * depth,
                }
            }
        }
    }

    /// Depth at pixel centre `(y, x)` if the primitive covers it.
    fn depth_at(&self, y: f64, x: f64, min: f64, max: f64) -> Option<f64> {
        match *self {
            Primitive::Rect {
                y0,
                y1,
                x0,
                x1,
                depth,
            } => (y >= y0 && y < y1 && x >= x0 && x < x1).then_some(depth),
            Primitive::Tilted {
                y0,
                y1,
                x0,
                x1,
                depth,
                gy,
                gx,
            } => (y >= y0 && y < y1 && x >= x0 && x < x1).then(|| {
                (depth + gy * (y - 0.5 * (y0 + y1)) + gx * (x - 0.5 * (x0 + x1))).clamp(min, max)
            }),
            Primitive::Sphere {
                cy,
                cx,
                radius,
                depth,
                bulge,
            } => {
                let r2 = ((y - cy).powi(2) + (x - cx).powi(2)) / (radius * radius);
                (r2 < 1.0).then(|| (depth - bulge * (1.0 - r2).sqrt()).clamp(min, max))
            }
        }
    }
}

/// Albedo of surface `label`: hues spread by the golden ratio so that
/// neighbouring labels never share a colour.
fn albedo(label: u32, offset: f64) -> [f64; 3] {
    let hue = (offset + label as f64 * 0.618_033_988_749_895).fract();
    let sat = if label.is_multiple_of(2) { 0.55 } else { 0.8 };
    let val = 0.6 + 0.35 * ((label * 7 % 5) as f64 / 4.0);
    hsv(hue, sat, val)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let (min, max) = spec.depth_range;
    if !(min > 0.0 && max > min) {
        return Err(Error::invalid(format!(
            "depth range {:?} must satisfy max > min > 0",
            spec.depth_range
        )));
    }
    if spec.primitive_count == 0 || spec.height < 2 || spec.width < 2 {
        return Err(Error::invalid(
            "a scene needs at least one primitive and 2x2 pixels",
        ));
    }
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = rng_from(spec.seed, 1);
    let horizon = rng.random_range(0.25..0.6) * hf;
    let hue_offset = rng.random_range(0.0..1.0);
    let prims: Vec<Primitive> = (0..spec.primitive_count)
        .map(|_| Primitive::random(&mut rng, hf, wf, min, max))
        .collect();

    let mut depth = vec![0.0; h * w];
    let mut labels = vec![0u32; h * w];
    for y in 0..h {
        let yc = y as f64 + 0.5;
        for x in 0..w {
            let xc = x as f64 + 0.5;
            let i = y * w + x;
            let (mut d, mut l) = if yc > horizon {
                // ground: depth inversely proportional to the distance below the horizon
                let t = (yc - horizon) / (hf - horizon);
                ((min / t).min(max), 0)
            } else {
                (max, 1)
            };
            for (k, p) in prims.iter().enumerate() {
                if let Some(pd) = p.depth_at(yc, xc, min, max) {
                    if pd < d {
                        d = pd;
                        l = k as u32 + 2;
                    }
                }
            }
            depth[i] = d;
            labels[i] = l;
        }
    }

    // Lambertian shading from normals of the depth map, differences taken
    // only within one surface.
    let light = {
        let v = [-0.4f64, -0.5, 0.77];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let gain = wf / (max - min);
    let slope = |i: usize, j: Option<usize>, k: Option<usize>| -> f64 {
        let same = |o: Option<usize>| o.filter(|&o| labels[o] == labels[i]);
        match (same(j), same(k)) {
            (Some(a), Some(b)) => 0.5 * (depth[b] - depth[a]),
            (None, Some(b)) => depth[b] - depth[i],
            (Some(a), None) => depth[i] - depth[a],
            (None, None) => 0.0,
        }
    };
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = slope(i, (x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1)) * gain;
            let dy = slope(i, (y > 0).then(|| i - w), (y + 1 < h).then(|| i + w)) * gain;
            let n = (dx * dx + dy * dy + 1.0).sqrt();
            let lambert = ((-dx * light[0] - dy * light[1] + light[2]) / n).max(0.0);
            let shade = 0.35 + 0.65 * lambert;
            let a = albedo(labels[i], hue_offset);
            rgb.extend(a.iter().map(|c| (c * shade).clamp(0.0, 1.0)));
        }
    }
    Ok(Scene {
        spec: *spec,
        rgb: RgbField::new(h, w, rgb)?,
        depth: DepthField::dense(h, w, depth)?,
        labels,
    })
}

/// `n` scenes with per-scene seeds split from `seed`. Bands are balanced
/// (⌊n/2⌋ indoor) and shuffled, so every split of two or more scenes holds
/// both.
pub fn generate_split(n: usize, seed: u64, height: usize, width: usize) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::invalid("a split needs at least one scene"));
    }
    let mut bands: Vec<Band> = (0..n)
        .map(|i| {
            if i < n / 2 {
                Band::Indoor
            } else {
                Band::Outdoor
            }
        })
        .collect();
    bands.shuffle(&mut rng_from(seed, u64::MAX));
    bands
        .iter()
        .enumerate()
        .map(|(i, &band)| {
            generate_scene(&SceneSpec::sample(
                split_seed(seed, i as u64),
                band,
                height,
                width,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depths_stay_in_range() {
        for seed in 0..20 {
            for band in [Band::Indoor, Band::Outdoor] {
                let spec = SceneSpec::sample(seed, band, 32, 48);
                let (min, max) = spec.depth_range;
                assert!(max > min && min > 0.0);
                let s = generate_scene(&spec).unwrap();
                assert_eq!(s.depth.valid_count(), 32 * 48);
                assert!(s.depth.values().iter().all(|&d| d >= min && d <= max));
                assert!(s.rgb.data().iter().all(|&c| (0.0..=1.0).contains(&c)));
            }
        }
    }

    #[test]
    fn depth_edges_are_colour_edges() {
        for seed in 0..10 {
            let s = generate_scene(&SceneSpec::sample(seed, Band::Indoor, 48, 48)).unwrap();
            let (h, w) = s.depth.dims();
            let mut edges = 0;
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)]
                        .into_iter()
                        .flatten()
                    {
                        if s.labels[i] != s.labels[j]
                            && (s.depth.values()[i] - s.depth.values()[j]).abs() > 1e-9
                        {
                            edges += 1;
                            let a = &s.rgb.data()[3 * i..3 * i + 3];
                            let b = &s.rgb.data()[3 * j..3 * j + 3];
                            let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum();
                            assert!(diff > 1e-3, "seed {seed} pixel {i}");
                        }
                    }
                }
            }
            assert!(edges > 0);
        }
    }

    #[test]
    fn splits_are_reproducible_and_mixed() {
        let a = generate_split(16, 3, 16, 16).unwrap();
        assert_eq!(a, generate_split(16, 3, 16, 16).unwrap());
        assert!(a.iter().any(|s| s.spec.band == Band::Indoor));
        assert!(a.iter().any(|s| s.spec.band == Band::Outdoor));
        let b = generate_split(16, 4, 16, 16).unwrap();
        assert!(a.iter().all(|s| b.iter().all(|t| t.depth != s.depth)));
        assert_eq!(generate_split(1, 0, 8, 8).unwrap().len(), 1);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = SceneSpec::sample(0, Band::Indoor, 8, 8);
        spec.depth_range = (2.0, 1.0);
        assert!(generate_scene(&spec).is_err());
        spec.depth_range = (1.0, 2.0);
        spec.primitive_count = 0;
        assert!(generate_scene(&spec).is_err());
    }
}
