//! Raw-depth degradation: turns a GT depth map into an input map X with
//! noise, blur, sparsity and holes, and builds training samples.

mod holes;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use holes::{inject_holes, synth_hole_masks, HoleMask, HOLE_COVERAGE};

use crate::error::{Error, Result};
use crate::field::{DepthField, RgbField};
use crate::scalar::{lit, to_f64, Real};
use crate::seed::{rng_from, split_seed};

/// Allowed standard deviations of the additive noise, normalized units.
pub const GAUSSIAN_STD_BOUNDS: (f64, f64) = (0.01, 0.1);
/// Impulse values of the salt-and-pepper stage.
pub const SALT: f64 = 1.0;
pub const PEPPER: f64 = 0.0;
/// Spatial sizes are kept divisible by this.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub gaussian_std_range: (f64, f64),
    pub saltpepper_prob_range: (f64, f64),
    pub zoom_factors: Vec<usize>,
    pub sparsity_range: (f64, f64),
    pub hole_count_range: (usize, usize),
    pub flip_prob: f64,
    pub noise_gate: f64,
    pub saltpepper_gate: f64,
    pub blur_gate: f64,
    pub hole_gate: f64,
    /// Output height; width follows the aspect ratio, floored to a
    /// multiple of 16.
    pub target_height: usize,
    /// Procedural hole masks generated once per augmenter.
    pub hole_bank_size: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gaussian_std_range: GAUSSIAN_STD_BOUNDS,
            saltpepper_prob_range: (0.0, 1.0),
            zoom_factors: vec![2, 4, 8, 16],
            sparsity_range: (0.0, 1.0),
            hole_count_range: (1, 3),
            flip_prob: 0.5,
            noise_gate: 0.5,
            saltpepper_gate: 0.5,
            blur_gate: 0.5,
            hole_gate: 0.5,
            target_height: 64,
            hole_bank_size: 32,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: (f64, f64), lo: f64, hi: f64) -> Result<()> {
    if !(lo <= r.0 && r.0 <= r.1 && r.1 <= hi) {
        return Err(Error::invalid(format!(
            "{name} {r:?} must satisfy {lo} <= low <= high <= {hi}"
        )));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "{name} must be a probability, got {p}"
        )));
    }
    Ok(())
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        check_range(
            "gaussian_std_range",
            self.gaussian_std_range,
            GAUSSIAN_STD_BOUNDS.0,
            GAUSSIAN_STD_BOUNDS.1,
        )?;
        check_range(
            "saltpepper_prob_range",
            self.saltpepper_prob_range,
            0.0,
            1.0,
        )?;
        check_range("sparsity_range", self.sparsity_range, 0.0, 1.0)?;
        if self.hole_count_range.0 > self.hole_count_range.1 {
            return Err(Error::invalid("hole_count_range must be ordered"));
        }
        if self.zoom_factors.is_empty()
            || self.zoom_factors.iter().any(|z| ![2, 4, 8, 16].contains(z))
        {
            return Err(Error::invalid(
                "zoom_factors must be a non-empty subset of {2, 4, 8, 16}",
            ));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("noise_gate", self.noise_gate),
            ("saltpepper_gate", self.saltpepper_gate),
            ("blur_gate", self.blur_gate),
            ("hole_gate", self.hole_gate),
        ] {
            check_prob(name, p)?;
        }
        if self.target_height == 0 || !self.target_height.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::invalid(format!(
                "target_height must be a positive multiple of {SIZE_MULTIPLE}, got {}",
                self.target_height
            )));
        }
        if self.hole_bank_size == 0 {
            return Err(Error::invalid("hole_bank_size must be at least 1"));
        }
        Ok(())
    }
}

/// Adds N(0, std²) noise at valid pixels and clamps at 0.
pub fn add_gaussian_noise<T: Real>(
    z: &DepthField<T>,
    std: f64,
    seed: u64,
) -> Result<DepthField<T>> {
    if !(GAUSSIAN_STD_BOUNDS.0..=GAUSSIAN_STD_BOUNDS.1).contains(&std) {
        return Err(Error::invalid(format!(
            "noise std {std} outside [{}, {}]",
            GAUSSIAN_STD_BOUNDS.0, GAUSSIAN_STD_BOUNDS.1
        )));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng_from(seed, 0);
    let values = z
        .values()
        .iter()
        .zip(z.valid())
        .map(|(&v, &ok)| {
            if ok {
                (v + lit::<T>(normal.sample(&mut rng))).max(T::zero())
            } else {
                v
            }
        })
        .collect();
    Ok(DepthField::from_parts_unchecked(
        z.height(),
        z.width(),
        values,
        z.valid().to_vec(),
    ))
}

/// Replaces each valid pixel, with probability `prob`, by 0 or 1 at equal
/// odds.
pub fn add_salt_pepper<T: Real>(z: &DepthField<T>, prob: f64, seed: u64) -> Result<DepthField<T>> {
    check_prob("salt-and-pepper probability", prob)?;
    let mut rng = rng_from(seed, 0);
    let values = z
        .values()
        .iter()
        .zip(z.valid())
        .map(|(&v, &ok)| {
            if ok && rng.random::<f64>() < prob {
                lit(if rng.random_bool(0.5) { SALT } else { PEPPER })
            } else {
                v
            }
        })
        .collect();
    Ok(DepthField::from_parts_unchecked(
        z.height(),
        z.width(),
        values,
        z.valid().to_vec(),
    ))
}

/// Mirror index into `0..n` (edge pixel repeated).
fn reflect(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let r = i % period;
    if r < n {
        r
    } else {
        period - 1 - r
    }
}

/// Block-average by `zoom`, then replicate each block back. A block stays
/// valid only if all its pixels are. Sizes that `zoom` does not divide are
/// reflect-padded and the result cropped.
pub fn blur_downup<T: Real>(z: &DepthField<T>, zoom: usize) -> Result<DepthField<T>> {
    if ![2, 4, 8, 16].contains(&zoom) {
        return Err(Error::invalid(format!(
            "zoom must be 2, 4, 8 or 16, got {zoom}"
        )));
    }
    let (h, w) = z.dims();
    let (bh, bw) = (h.div_ceil(zoom), w.div_ceil(zoom));
    let mut values = vec![T::zero(); h * w];
    let mut valid = vec![false; h * w];
    let inv = T::one() / lit::<T>((zoom * zoom) as f64);
    for by in 0..bh {
        for bx in 0..bw {
            let mut sum = T::zero();
            let mut all = true;
            for dy in 0..zoom {
                let y = reflect(by * zoom + dy, h);
                for dx in 0..zoom {
                    let i = y * w + reflect(bx * zoom + dx, w);
                    all &= z.valid()[i];
                    sum += z.values()[i];
                }
            }
            let mean = if all { sum * inv } else { T::zero() };
            for y in by * zoom..((by + 1) * zoom).min(h) {
                for x in bx * zoom..((bx + 1) * zoom).min(w) {
                    values[y * w + x] = mean;
                    valid[y * w + x] = all;
                }
            }
        }
    }
    Ok(DepthField::from_parts_unchecked(h, w, values, valid))
}

/// Keeps each valid pixel independently with probability `rate`.
pub fn sparsify<T: Real>(z: &DepthField<T>, rate: f64, seed: u64) -> Result<DepthField<T>> {
    check_prob("sampling rate", rate)?;
    let mut rng = rng_from(seed, 0);
    let keep: Vec<bool> = z
        .valid()
        .iter()
        .map(|&ok| ok && rng.random::<f64>() < rate)
        .collect();
    Ok(z.masked(&keep))
}

/// RGB image, degraded input X and GT, all the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample<T> {
    pub rgb: RgbField<T>,
    pub x: DepthField<T>,
    pub gt: DepthField<T>,
}

/// Degradations applied to one sample, for logs and tests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentTrace {
    pub flipped: bool,
    pub gaussian_std: Option<f64>,
    pub saltpepper_prob: Option<f64>,
    pub zoom: Option<usize>,
    pub sparsity: f64,
    pub hole_count: usize,
}

// stream ids for per-stage seeds
const S_FLIP: u64 = 1;
const S_GATES: u64 = 2;
const S_NOISE: u64 = 3;
const S_SALT: u64 = 4;
const S_SPARSE: u64 = 5;
const S_HOLES: u64 = 6;
const S_BANK: u64 = 7;

/// Output size for an input of `h × w`: height `target`, width scaled by
/// the aspect ratio and floored to a multiple of 16 (at least 16).
pub fn training_size(h: usize, w: usize, target: usize) -> (usize, usize) {
    let scaled = (w as f64 * target as f64 / h as f64).floor() as usize;
    (target, (scaled / SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE)
}

/// Divides depth by its largest valid value and resizes both fields to
/// [`training_size`] (nearest for depth, bilinear for colour).
pub fn normalize_pair<T: Real>(
    rgb: &RgbField<T>,
    z: &DepthField<T>,
    target_height: usize,
) -> Result<(RgbField<T>, DepthField<T>)> {
    if rgb.dims() != z.dims() {
        return Err(Error::SizeMismatch {
            expected: z.dims(),
            got: rgb.dims(),
        });
    }
    let max = z
        .max_valid()
        .ok_or_else(|| Error::Degenerate("GT has no valid pixel".into()))?;
    if max <= T::zero() {
        return Err(Error::Degenerate(format!(
            "GT maximum {} is not positive",
            to_f64(max)
        )));
    }
    let (th, tw) = training_size(z.height(), z.width(), target_height);
    Ok((
        rgb.resize_bilinear(th, tw),
        z.scaled(T::one() / max).resize_nearest(th, tw),
    ))
}

/// Pipeline state shared across samples: the validated config and the
/// hole bank derived from its seed.
#[derive(Clone, Debug)]
pub struct Augmenter {
    config: AugmentConfig,
    holes: Vec<HoleMask>,
}

impl Augmenter {
    pub fn new(config: AugmentConfig) -> Result<Self> {
        config.validate()?;
        let h = config.target_height;
        let holes = synth_hole_masks(config.hole_bank_size, h, h, split_seed(config.seed, S_BANK))?;
        Ok(Self { config, holes })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.config
    }

    pub fn holes(&self) -> &[HoleMask] {
        &self.holes
    }

    /// Rescales, resizes and flips the pair, then degrades a copy of GT
    /// into X. GT values are never degraded.
    pub fn sample<T: Real>(
        &self,
        rgb: &RgbField<T>,
        z: &DepthField<T>,
        seed: u64,
    ) -> Result<TrainingSample<T>> {
        Ok(self.sample_traced(rgb, z, seed)?.0)
    }

    pub fn sample_traced<T: Real>(
        &self,
        rgb: &RgbField<T>,
        z: &DepthField<T>,
        seed: u64,
    ) -> Result<(TrainingSample<T>, AugmentTrace)> {
        let (rgb, gt) = self.prepare(rgb, z, seed)?;
        let flipped = self.was_flipped(seed);
        let (x, mut trace) = self.degrade(&gt, seed)?;
        trace.flipped = flipped;
        Ok((TrainingSample { rgb, x, gt }, trace))
    }

    fn was_flipped(&self, seed: u64) -> bool {
        rng_from(seed, S_FLIP).random::<f64>() < self.config.flip_prob
    }

    /// Rescale by max valid depth, resize, flip.
    pub fn prepare<T: Real>(
        &self,
        rgb: &RgbField<T>,
        z: &DepthField<T>,
        seed: u64,
    ) -> Result<(RgbField<T>, DepthField<T>)> {
        let (rgb, gt) = normalize_pair(rgb, z, self.config.target_height)?;
        if self.was_flipped(seed) {
            Ok((rgb.flip_horizontal(), gt.flip_horizontal()))
        } else {
            Ok((rgb, gt))
        }
    }

    /// Builds X from an already prepared GT.
    pub fn degrade<T: Real>(
        &self,
        gt: &DepthField<T>,
        seed: u64,
    ) -> Result<(DepthField<T>, AugmentTrace)> {
        let c = &self.config;
        let mut gates = rng_from(seed, S_GATES);
        let mut trace = AugmentTrace::default();
        let mut x = gt.clone();
        if gates.random::<f64>() < c.saltpepper_gate {
            let p = gates.random_range(c.saltpepper_prob_range.0..=c.saltpepper_prob_range.1);
            x = add_salt_pepper(&x, p, split_seed(seed, S_SALT))?;
            trace.saltpepper_prob = Some(p);
        }
        if gates.random::<f64>() < c.noise_gate {
            let s = gates.random_range(c.gaussian_std_range.0..=c.gaussian_std_range.1);
            x = add_gaussian_noise(&x, s, split_seed(seed, S_NOISE))?;
            trace.gaussian_std = Some(s);
        }
        if gates.random::<f64>() < c.blur_gate {
            let zoom = c.zoom_factors[gates.random_range(0..c.zoom_factors.len())];
            x = blur_downup(&x, zoom)?;
            trace.zoom = Some(zoom);
        }
        let rate = gates.random_range(c.sparsity_range.0..=c.sparsity_range.1);
        x = sparsify(&x, rate, split_seed(seed, S_SPARSE))?;
        trace.sparsity = rate;
        if gates.random::<f64>() < c.hole_gate {
            let n = gates.random_range(c.hole_count_range.0..=c.hole_count_range.1);
            x = inject_holes(&x, &self.holes, n, split_seed(seed, S_HOLES))?;
            trace.hole_count = n;
        }
        Ok((x, trace))
    }
}

/// One-off version of [`Augmenter::sample`]; builds the hole bank each call.
pub fn make_training_sample<T: Real>(
    rgb: &RgbField<T>,
    z: &DepthField<T>,
    config: &AugmentConfig,
    seed: u64,
) -> Result<TrainingSample<T>> {
    Augmenter::new(config.clone())?.sample(rgb, z, seed)
}
