//! Training-time stochastic transforms and deterministic validation prep.
//!
//! Geometric ops move detection centroids together with the pixels, so a
//! mask rendered after augmentation still lands on the transformed
//! figures; photometric ops leave targets alone. Everything is driven by
//! an explicit RNG, so a replayed state reproduces the exact pixels.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-sample training target, carried through augmentation.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleTarget {
    /// Mitosis centroids as `(x, y)` pixel coordinates.
    Centroids(Vec<(f64, f64)>),
    /// Patch-level class label.
    Label(u8),
}

/// An image plus its target, the unit augmentation operates on.
#[derive(Clone, Debug)]
pub struct Sample<T: Scalar> {
    /// `(3, h, w)` RGB in `[0, 1]`.
    pub image: Array3<T>,
    pub target: SampleTarget,
}

impl<T: Scalar> Sample<T> {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    fn centroids_mut(&mut self) -> Option<&mut Vec<(f64, f64)>> {
        match &mut self.target {
            SampleTarget::Centroids(c) => Some(c),
            SampleTarget::Label(_) => None,
        }
    }

    fn centroid_count(&self) -> usize {
        match &self.target {
            SampleTarget::Centroids(c) => c.len(),
            SampleTarget::Label(_) => 0,
        }
    }
}

fn clamp01<T: Scalar>(x: T) -> T {
    x.max(T::zero()).min(T::one())
}

// ---- deterministic primitives ----

/// Mirror left-right; centroid x maps to `(w - 1) - x`.
pub fn hflip<T: Scalar>(sample: &mut Sample<T>) {
    let w = sample.width();
    sample.image.invert_axis(ndarray::Axis(2));
    if let Some(cs) = sample.centroids_mut() {
        for c in cs {
            c.0 = (w - 1) as f64 - c.0;
        }
    }
}

/// Mirror top-bottom; centroid y maps to `(h - 1) - y`.
pub fn vflip<T: Scalar>(sample: &mut Sample<T>) {
    let h = sample.height();
    sample.image.invert_axis(ndarray::Axis(1));
    if let Some(cs) = sample.centroids_mut() {
        for c in cs {
            c.1 = (h - 1) as f64 - c.1;
        }
    }
}

/// Reflect an integer coordinate into `[0, n)` without repeating the edge.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn bilinear<T: Scalar>(img: &Array3<T>, c: usize, y: f64, x: f64) -> T {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let yi = [reflect(y0 as isize, h), reflect(y0 as isize + 1, h)];
    let xi = [reflect(x0 as isize, w), reflect(x0 as isize + 1, w)];
    let v00 = img[[c, yi[0], xi[0]]].as_f64();
    let v01 = img[[c, yi[0], xi[1]]].as_f64();
    let v10 = img[[c, yi[1], xi[0]]].as_f64();
    let v11 = img[[c, yi[1], xi[1]]].as_f64();
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    T::of_f64(top * (1.0 - fy) + bot * fy)
}

/// Rotate about the image center with reflect padding; centroids rotate
/// the same way and are dropped if they leave the frame.
pub fn rotate<T: Scalar>(sample: &mut Sample<T>, degrees: f64) {
    let (h, w) = (sample.height(), sample.width());
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h - 1) as f64 / 2.0;
    let cx = (w - 1) as f64 / 2.0;
    let mut out = Array3::<T>::zeros((3, h, w));
    for v in 0..h {
        for u in 0..w {
            let du = u as f64 - cx;
            let dv = v as f64 - cy;
            // inverse map: sample the source location that rotates onto (u, v)
            let sx = cos * du + sin * dv + cx;
            let sy = -sin * du + cos * dv + cy;
            for c in 0..3 {
                out[[c, v, u]] = bilinear(&sample.image, c, sy, sx);
            }
        }
    }
    sample.image = out;
    if let Some(cs) = sample.centroids_mut() {
        let rotated: Vec<(f64, f64)> = cs
            .iter()
            .map(|&(x, y)| {
                let dx = x - cx;
                let dy = y - cy;
                (cos * dx - sin * dy + cx, sin * dx + cos * dy + cy)
            })
            .filter(|&(x, y)| x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64)
            .collect();
        *cs = rotated;
    }
}

/// Resize to `(out_h, out_w)` with half-pixel-centered bilinear sampling.
pub fn resize<T: Scalar>(sample: &mut Sample<T>, out_h: usize, out_w: usize) {
    let (h, w) = (sample.height(), sample.width());
    if (h, w) == (out_h, out_w) {
        return;
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array3::<T>::zeros((3, out_h, out_w));
    for v in 0..out_h {
        for u in 0..out_w {
            let src_y = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let src_x = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            for c in 0..3 {
                out[[c, v, u]] = bilinear(&sample.image, c, src_y, src_x);
            }
        }
    }
    sample.image = out;
    if let Some(cs) = sample.centroids_mut() {
        for c in cs {
            c.0 = (c.0 + 0.5) / sx - 0.5;
            c.1 = (c.1 + 0.5) / sy - 0.5;
        }
    }
}

/// Crop the square `(x0, y0, edge)` and resize it to `out_size`.
///
/// Centroids outside the crop are dropped; the rest map through the same
/// crop-then-scale transform as the pixels.
pub fn crop_resize<T: Scalar>(
    sample: &mut Sample<T>,
    x0: usize,
    y0: usize,
    edge: usize,
    out_size: usize,
) {
    let kept: Option<Vec<(f64, f64)>> = sample.centroids_mut().map(|cs| {
        cs.iter()
            .filter(|&&(x, y)| {
                x >= x0 as f64 && x < (x0 + edge) as f64 && y >= y0 as f64 && y < (y0 + edge) as f64
            })
            .map(|&(x, y)| (x - x0 as f64, y - y0 as f64))
            .collect()
    });
    let mut cropped = Array3::<T>::zeros((3, edge, edge));
    for c in 0..3 {
        for y in 0..edge {
            for x in 0..edge {
                cropped[[c, y, x]] = sample.image[[c, y0 + y, x0 + x]];
            }
        }
    }
    sample.image = cropped;
    if let Some(kept) = kept {
        sample.target = SampleTarget::Centroids(kept);
    }
    resize(sample, out_size, out_size);
}

/// Multiply all channels by `factor`, clamped to `[0, 1]`.
pub fn brightness<T: Scalar>(sample: &mut Sample<T>, factor: f64) {
    let f = T::of_f64(factor);
    sample.image.mapv_inplace(|x| clamp01(x * f));
}

/// Scale contrast about the mean gray level of the image.
pub fn contrast<T: Scalar>(sample: &mut Sample<T>, factor: f64) {
    let mean = luma_mean(&sample.image);
    let (m, f) = (T::of_f64(mean), T::of_f64(factor));
    sample.image.mapv_inplace(|x| clamp01(m + (x - m) * f));
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luma_mean<T: Scalar>(img: &Array3<T>) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                sum += LUMA[c] * img[[c, y, x]].as_f64();
            }
        }
    }
    sum / (h * w) as f64
}

/// Blend each pixel toward its own gray value: 0 = grayscale, 1 = identity.
pub fn saturation<T: Scalar>(sample: &mut Sample<T>, factor: f64) {
    let (h, w) = (sample.height(), sample.width());
    for y in 0..h {
        for x in 0..w {
            let gray: f64 = (0..3)
                .map(|c| LUMA[c] * sample.image[[c, y, x]].as_f64())
                .sum();
            for c in 0..3 {
                let v = sample.image[[c, y, x]].as_f64();
                sample.image[[c, y, x]] = clamp01(T::of_f64(gray + (v - gray) * factor));
            }
        }
    }
}

/// Rotate hue by `degrees` with the standard luma-preserving linear matrix.
pub fn hue_rotate<T: Scalar>(sample: &mut Sample<T>, degrees: f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    let m = [
        [
            0.213 + 0.787 * c - 0.213 * s,
            0.715 - 0.715 * c - 0.715 * s,
            0.072 - 0.072 * c + 0.928 * s,
        ],
        [
            0.213 - 0.213 * c + 0.143 * s,
            0.715 + 0.285 * c + 0.140 * s,
            0.072 - 0.072 * c - 0.283 * s,
        ],
        [
            0.213 - 0.213 * c - 0.787 * s,
            0.715 - 0.715 * c + 0.715 * s,
            0.072 + 0.928 * c + 0.072 * s,
        ],
    ];
    let (h, w) = (sample.height(), sample.width());
    for y in 0..h {
        for x in 0..w {
            let rgb = [
                sample.image[[0, y, x]].as_f64(),
                sample.image[[1, y, x]].as_f64(),
                sample.image[[2, y, x]].as_f64(),
            ];
            for ci in 0..3 {
                let v = m[ci][0] * rgb[0] + m[ci][1] * rgb[1] + m[ci][2] * rgb[2];
                sample.image[[ci, y, x]] = clamp01(T::of_f64(v));
            }
        }
    }
}

/// Replace all channels by the pixel's luma.
pub fn grayscale<T: Scalar>(sample: &mut Sample<T>) {
    saturation(sample, 0.0);
}

/// Fill the rectangle with uniform noise; targets are untouched.
pub fn erase<T: Scalar>(
    sample: &mut Sample<T>,
    x0: usize,
    y0: usize,
    rect_w: usize,
    rect_h: usize,
    rng: &mut ChaCha8Rng,
) {
    let (h, w) = (sample.height(), sample.width());
    for y in y0..(y0 + rect_h).min(h) {
        for x in x0..(x0 + rect_w).min(w) {
            for c in 0..3 {
                sample.image[[c, y, x]] = T::of_f64(rng.gen::<f64>());
            }
        }
    }
}

// ---- policy ----

/// One augmentation with its sampling ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum AugmentOp {
    HorizontalFlip,
    VerticalFlip,
    Rotate { max_degrees: f64 },
    ResizedCrop { min_scale: f64, max_scale: f64 },
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue_degrees: f64,
    },
    Grayscale,
    RandomErasing { min_area: f64, max_area: f64 },
}

/// An op paired with its application probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpSpec {
    pub op: AugmentOp,
    pub probability: f64,
}

/// Ops available to [`strong_augment`]; magnitude scales each op's reach.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongOp {
    HorizontalFlip,
    VerticalFlip,
    Rotate,
    Brightness,
    Contrast,
    Saturation,
    Grayscale,
}

impl StrongOp {
    pub const DEFAULT_POOL: [StrongOp; 7] = [
        StrongOp::HorizontalFlip,
        StrongOp::VerticalFlip,
        StrongOp::Rotate,
        StrongOp::Brightness,
        StrongOp::Contrast,
        StrongOp::Saturation,
        StrongOp::Grayscale,
    ];
}

/// Randomized op-sequence augmentation: sample `num_ops` distinct ops and
/// compose them with random magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongAugmentSpec {
    pub num_ops: usize,
    pub magnitude_range: (f64, f64),
    pub pool: Vec<StrongOp>,
}

impl Default for StrongAugmentSpec {
    fn default() -> Self {
        StrongAugmentSpec {
            num_ops: 2,
            magnitude_range: (0.1, 0.9),
            pool: StrongOp::DEFAULT_POOL.to_vec(),
        }
    }
}

/// The full training-time augmentation recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub ops: Vec<OpSpec>,
    pub strong_augment: Option<StrongAugmentSpec>,
    /// Final square edge; `None` keeps the input resolution.
    pub output_size: Option<usize>,
}

impl AugmentPolicy {
    /// Geometric-only policy for segmentation patches (resolution kept).
    pub fn detection_default() -> Self {
        AugmentPolicy {
            ops: vec![
                OpSpec {
                    op: AugmentOp::HorizontalFlip,
                    probability: 0.5,
                },
                OpSpec {
                    op: AugmentOp::VerticalFlip,
                    probability: 0.5,
                },
                OpSpec {
                    op: AugmentOp::Rotate { max_degrees: 30.0 },
                    probability: 0.5,
                },
            ],
            strong_augment: None,
            output_size: None,
        }
    }

    /// Full photometric + geometric policy for classification patches.
    pub fn classification_default(output_size: usize) -> Self {
        AugmentPolicy {
            ops: vec![
                OpSpec {
                    op: AugmentOp::ResizedCrop {
                        min_scale: 0.8,
                        max_scale: 1.0,
                    },
                    probability: 1.0,
                },
                OpSpec {
                    op: AugmentOp::HorizontalFlip,
                    probability: 0.5,
                },
                OpSpec {
                    op: AugmentOp::VerticalFlip,
                    probability: 0.5,
                },
                OpSpec {
                    op: AugmentOp::Rotate { max_degrees: 30.0 },
                    probability: 0.5,
                },
                OpSpec {
                    op: AugmentOp::ColorJitter {
                        brightness: 0.2,
                        contrast: 0.2,
                        saturation: 0.2,
                        hue_degrees: 18.0,
                    },
                    probability: 0.8,
                },
                OpSpec {
                    op: AugmentOp::Grayscale,
                    probability: 0.1,
                },
                OpSpec {
                    op: AugmentOp::RandomErasing {
                        min_area: 0.02,
                        max_area: 0.2,
                    },
                    probability: 0.25,
                },
            ],
            strong_augment: Some(StrongAugmentSpec::default()),
            output_size: Some(output_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for spec in &self.ops {
            if !(0.0..=1.0).contains(&spec.probability) {
                return Err(Error::InvalidParameter(format!(
                    "op probability {} outside [0, 1]",
                    spec.probability
                )));
            }
        }
        if let Some(sa) = &self.strong_augment {
            if sa.num_ops == 0 || sa.pool.is_empty() {
                return Err(Error::InvalidParameter(
                    "strong augmentation needs at least one op".into(),
                ));
            }
            let (lo, hi) = sa.magnitude_range;
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::InvalidParameter(
                    "magnitude range must satisfy 0 <= lo <= hi <= 1".into(),
                ));
            }
        }
        Ok(())
    }
}

fn apply_op<T: Scalar>(sample: &mut Sample<T>, op: &AugmentOp, rng: &mut ChaCha8Rng) {
    match op {
        AugmentOp::HorizontalFlip => hflip(sample),
        AugmentOp::VerticalFlip => vflip(sample),
        AugmentOp::Rotate { max_degrees } => {
            let deg = rng.gen_range(-max_degrees..=*max_degrees);
            let before = sample.clone();
            rotate(sample, deg);
            // a rotation that sweeps every target out of frame is discarded
            if before.centroid_count() > 0 && sample.centroid_count() == 0 {
                *sample = before;
            }
        }
        AugmentOp::ResizedCrop {
            min_scale,
            max_scale,
        } => {
            let (h, w) = (sample.height(), sample.width());
            let short = h.min(w);
            let out = short; // final ensure-resize handles the policy size
            let had = sample.centroid_count();
            for attempt in 0..=10 {
                let scale = rng.gen_range(*min_scale..=*max_scale);
                let edge = ((scale.sqrt() * short as f64).round() as usize).clamp(8, short);
                let (x0, y0) = if attempt == 10 {
                    // fallback: centered at full scale keeps every target
                    ((w - short) / 2, (h - short) / 2)
                } else {
                    (
                        rng.gen_range(0..=w - edge),
                        rng.gen_range(0..=h - edge),
                    )
                };
                let edge = if attempt == 10 { short } else { edge };
                let mut trial = sample.clone();
                crop_resize(&mut trial, x0, y0, edge, out);
                if had == 0 || trial.centroid_count() > 0 {
                    *sample = trial;
                    return;
                }
            }
        }
        AugmentOp::ColorJitter {
            brightness: b,
            contrast: c,
            saturation: s,
            hue_degrees: hd,
        } => {
            brightness(sample, rng.gen_range(1.0 - b..=1.0 + b));
            contrast(sample, rng.gen_range(1.0 - c..=1.0 + c));
            saturation(sample, rng.gen_range(1.0 - s..=1.0 + s));
            hue_rotate(sample, rng.gen_range(-hd..=*hd));
        }
        AugmentOp::Grayscale => grayscale(sample),
        AugmentOp::RandomErasing { min_area, max_area } => {
            let (h, w) = (sample.height(), sample.width());
            let area = rng.gen_range(*min_area..=*max_area) * (h * w) as f64;
            let aspect = rng.gen_range(0.3f64..=3.3).ln().exp();
            let rect_h = ((area * aspect).sqrt().round() as usize).clamp(1, h);
            let rect_w = ((area / aspect).sqrt().round() as usize).clamp(1, w);
            let y0 = rng.gen_range(0..=h - rect_h);
            let x0 = rng.gen_range(0..=w - rect_w);
            erase(sample, x0, y0, rect_w, rect_h, rng);
        }
    }
}

/// Apply the policy's ops (each with its own probability), then strong
/// augmentation if configured, then the final size guarantee.
pub fn train_transform<T: Scalar>(
    sample: &mut Sample<T>,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    policy.validate()?;
    for spec in &policy.ops {
        if rng.gen::<f64>() < spec.probability {
            apply_op(sample, &spec.op, rng);
        }
    }
    if let Some(sa) = &policy.strong_augment {
        strong_augment(sample, sa, rng)?;
    }
    if let Some(size) = policy.output_size {
        resize(sample, size, size);
    }
    Ok(())
}

fn apply_strong_op<T: Scalar>(
    sample: &mut Sample<T>,
    op: StrongOp,
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) {
    match op {
        StrongOp::HorizontalFlip => hflip(sample),
        StrongOp::VerticalFlip => vflip(sample),
        StrongOp::Rotate => {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let before = sample.clone();
            rotate(sample, sign * magnitude * 30.0);
            if before.centroid_count() > 0 && sample.centroid_count() == 0 {
                *sample = before;
            }
        }
        StrongOp::Brightness => {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            brightness(sample, 1.0 + sign * magnitude * 0.5);
        }
        StrongOp::Contrast => {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            contrast(sample, 1.0 + sign * magnitude * 0.5);
        }
        StrongOp::Saturation => {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            saturation(sample, 1.0 + sign * magnitude * 0.5);
        }
        StrongOp::Grayscale => grayscale(sample),
    }
}

/// Sample `num_ops` distinct pool ops with random magnitudes and compose
/// them in draw order. Returns the ops applied, in order.
pub fn strong_augment<T: Scalar>(
    sample: &mut Sample<T>,
    spec: &StrongAugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StrongOp>> {
    if spec.num_ops == 0 || spec.pool.is_empty() {
        return Err(Error::InvalidParameter(
            "strong augmentation needs at least one op".into(),
        ));
    }
    let mut order: Vec<StrongOp> = spec.pool.clone();
    order.shuffle(rng);
    order.truncate(spec.num_ops.min(spec.pool.len()));
    let (lo, hi) = spec.magnitude_range;
    for &op in &order {
        let magnitude = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        apply_strong_op(sample, op, magnitude, rng);
    }
    Ok(order)
}

// ---- validation-time prep ----

/// Per-channel affine normalization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeSpec {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for NormalizeSpec {
    fn default() -> Self {
        // the widely used natural-image statistics; override in config if
        // a dataset-specific estimate is available
        NormalizeSpec {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Apply `(x - mean) / std` per channel, in place.
pub fn normalize_image<T: Scalar>(image: &mut Array3<T>, spec: &NormalizeSpec) {
    for c in 0..3 {
        let m = T::of_f64(spec.mean[c]);
        let s = T::of_f64(1.0 / spec.std[c]);
        for v in image.index_axis_mut(ndarray::Axis(0), c) {
            *v = (*v - m) * s;
        }
    }
}

/// Deterministic inference-time prep: resize, center crop, normalize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValTransform {
    pub output_size: usize,
    /// Resize edge relative to the crop edge before center-cropping.
    pub resize_factor: f64,
    pub normalize: NormalizeSpec,
}

impl ValTransform {
    pub fn new(output_size: usize) -> Self {
        ValTransform {
            output_size,
            resize_factor: 256.0 / 224.0,
            normalize: NormalizeSpec::default(),
        }
    }

    pub fn apply<T: Scalar>(&self, sample: &mut Sample<T>) {
        let edge = (self.output_size as f64 * self.resize_factor).round() as usize;
        resize(sample, edge, edge);
        let off = (edge - self.output_size) / 2;
        crop_resize(sample, off, off, self.output_size, self.output_size);
        normalize_image(&mut sample.image, &self.normalize);
    }
}

/// Independent RNG stream for a data worker at a given epoch.
///
/// The three coordinates are mixed with distinct odd multipliers rather
/// than XORed directly, so swapping worker and epoch never collides.
pub fn worker_rng(global_seed: u64, worker_id: u64, epoch: u64) -> ChaCha8Rng {
    let mixed = global_seed
        ^ worker_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha8Rng::seed_from_u64(mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{render_disk_mask, DiskTargetSpec};
    use ndarray::Array2;
    use rand::SeedableRng;

    fn noise_sample(h: usize, w: usize, target: SampleTarget, seed: u64) -> Sample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Array3::from_shape_fn((3, h, w), |_| rng.gen::<f64>());
        Sample { image, target }
    }

    #[test]
    fn hflip_reflects_centroid_across_width() {
        let mut s = noise_sample(8, 512, SampleTarget::Centroids(vec![(10.0, 3.0)]), 0);
        hflip(&mut s);
        assert_eq!(s.target, SampleTarget::Centroids(vec![(501.0, 3.0)]));
        hflip(&mut s);
        assert_eq!(s.target, SampleTarget::Centroids(vec![(10.0, 3.0)]));
    }

    #[test]
    fn identity_policy_is_resize_only() {
        let base = noise_sample(48, 48, SampleTarget::Label(1), 1);
        let policy = AugmentPolicy {
            ops: vec![OpSpec {
                op: AugmentOp::HorizontalFlip,
                probability: 0.0,
            }],
            strong_augment: None,
            output_size: None,
        };
        let mut out = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        train_transform(&mut out, &policy, &mut rng).unwrap();
        assert_eq!(out.image, base.image);

        // with a target size, the identity policy equals plain resize
        let sized = AugmentPolicy {
            output_size: Some(32),
            ..policy
        };
        let mut resized_by_policy = base.clone();
        train_transform(&mut resized_by_policy, &sized, &mut rng).unwrap();
        let mut plain = base.clone();
        resize(&mut plain, 32, 32);
        assert_eq!(resized_by_policy.image, plain.image);
    }

    #[test]
    fn replayed_rng_state_reproduces_pixels() {
        let base = noise_sample(40, 40, SampleTarget::Label(0), 3);
        let policy = AugmentPolicy::classification_default(32);
        let mut a = base.clone();
        let mut b = base.clone();
        train_transform(&mut a, &policy, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        train_transform(&mut b, &policy, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.image, b.image);

        let mut c = base.clone();
        train_transform(&mut c, &policy, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_ne!(a.image, c.image);
    }

    fn mask_from(centroids: &[(f64, f64)], size: usize) -> Array2<u8> {
        let spec = DiskTargetSpec {
            diameter_px: 21,
            patch_size_px: size,
            mpp: 0.25,
        };
        render_disk_mask(centroids, &spec).unwrap()
    }

    #[test]
    fn flipped_centroids_rerender_to_the_flipped_mask() {
        let centroids = vec![(20.0, 31.0), (47.5, 12.25)];
        let mut s = noise_sample(64, 64, SampleTarget::Centroids(centroids.clone()), 4);
        let mut expected = mask_from(&centroids, 64);
        hflip(&mut s);
        vflip(&mut s);
        expected.invert_axis(ndarray::Axis(1));
        expected.invert_axis(ndarray::Axis(0));
        let got = match &s.target {
            SampleTarget::Centroids(c) => mask_from(c, 64),
            _ => unreachable!(),
        };
        assert_eq!(got, expected);
    }

    /// 3x3 erosion/dilation for the boundary-tolerance check.
    fn morph(mask: &Array2<u8>, dilate: bool) -> Array2<u8> {
        let (h, w) = mask.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut hit = !dilate;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    let v = if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        0
                    } else {
                        mask[[ny as usize, nx as usize]]
                    };
                    if dilate {
                        hit |= v == 1;
                    } else {
                        hit &= v == 1;
                    }
                }
            }
            hit as u8
        })
    }

    #[test]
    fn rotated_centroids_rerender_within_one_pixel_of_the_rotated_mask() {
        let centroids = vec![(32.0, 30.0)];
        let size = 64;
        let mask = mask_from(&centroids, size);
        let mut mask_sample = Sample {
            image: Array3::from_shape_fn((3, size, size), |(_, y, x)| mask[[y, x]] as f64),
            target: SampleTarget::Centroids(centroids),
        };
        rotate(&mut mask_sample, 17.0);
        let rotated_mask = Array2::from_shape_fn((size, size), |(y, x)| {
            (mask_sample.image[[0, y, x]] >= 0.5) as u8
        });
        let rerendered = match &mask_sample.target {
            SampleTarget::Centroids(c) => mask_from(c, size),
            _ => unreachable!(),
        };
        let eroded = morph(&rerendered, false);
        let dilated = morph(&rerendered, true);
        for y in 0..size {
            for x in 0..size {
                assert!(
                    rotated_mask[[y, x]] >= eroded[[y, x]],
                    "rotation lost interior pixel ({x}, {y})"
                );
                assert!(
                    rotated_mask[[y, x]] <= dilated[[y, x]],
                    "rotation grew past the boundary at ({x}, {y})"
                );
            }
        }
    }

    #[test]
    fn singleton_pool_applies_exactly_that_op() {
        let base = noise_sample(24, 24, SampleTarget::Label(0), 5);
        let spec = StrongAugmentSpec {
            num_ops: 1,
            magnitude_range: (0.5, 0.5),
            pool: vec![StrongOp::HorizontalFlip],
        };
        let mut out = base.clone();
        let applied =
            strong_augment(&mut out, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(applied, vec![StrongOp::HorizontalFlip]);
        let mut expected = base.clone();
        hflip(&mut expected);
        assert_eq!(out.image, expected.image);
    }

    #[test]
    fn strong_ops_are_drawn_uniformly() {
        let spec = StrongAugmentSpec {
            num_ops: 1,
            ..StrongAugmentSpec::default()
        };
        let mut counts = std::collections::BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..1000 {
            let mut s = noise_sample(8, 8, SampleTarget::Label(0), i);
            let applied = strong_augment(&mut s, &spec, &mut rng).unwrap();
            *counts.entry(format!("{:?}", applied[0])).or_insert(0usize) += 1;
        }
        let uniform = 1.0 / spec.pool.len() as f64;
        assert_eq!(counts.len(), spec.pool.len());
        for (op, n) in counts {
            let freq = n as f64 / 1000.0;
            assert!(
                (freq - uniform).abs() < 0.05,
                "{op} drawn with frequency {freq}, expected ~{uniform:.3}"
            );
        }
    }

    #[test]
    fn composed_strong_augment_is_reproducible() {
        let base = noise_sample(24, 24, SampleTarget::Label(1), 7);
        let spec = StrongAugmentSpec::default();
        let mut a = base.clone();
        let mut b = base.clone();
        let ops_a = strong_augment(&mut a, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let ops_b = strong_augment(&mut b, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(ops_a, ops_b);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn val_transform_resizes_center_crops_and_normalizes() {
        let mut s = noise_sample(512, 512, SampleTarget::Label(0), 8);
        let vt = ValTransform::new(224);
        vt.apply(&mut s);
        assert_eq!(s.image.shape(), [3, 224, 224]);

        // applying the same deterministic prep twice gives identical output
        let mut t1 = noise_sample(96, 96, SampleTarget::Label(0), 9);
        let mut t2 = t1.clone();
        let vt = ValTransform::new(32);
        vt.apply(&mut t1);
        vt.apply(&mut t2);
        assert_eq!(t1.image, t2.image);

        // a constant image maps to the per-channel affine constants
        let mut c = Sample {
            image: Array3::from_elem((3, 64, 64), 0.5f64),
            target: SampleTarget::Label(1),
        };
        let vt = ValTransform::new(32);
        vt.apply(&mut c);
        let norm = NormalizeSpec::default();
        for ch in 0..3 {
            let expected = (0.5 - norm.mean[ch]) / norm.std[ch];
            for &v in c.image.index_axis(ndarray::Axis(0), ch) {
                assert!((v - expected).abs() < 1e-12, "channel {ch}: {v} vs {expected}");
            }
        }
    }

    #[test]
    fn detection_policy_keeps_targets_in_frame() {
        let policy = AugmentPolicy::detection_default();
        for seed in 0..30 {
            let mut s = noise_sample(
                64,
                64,
                SampleTarget::Centroids(vec![(30.0, 28.0), (45.0, 50.0)]),
                seed,
            );
            train_transform(&mut s, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            match &s.target {
                SampleTarget::Centroids(cs) => {
                    assert!(!cs.is_empty(), "seed {seed} lost every centroid");
                    for &(x, y) in cs {
                        assert!((0.0..64.0).contains(&x) && (0.0..64.0).contains(&y));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn erase_changes_only_the_rectangle() {
        let base = noise_sample(32, 32, SampleTarget::Label(1), 10);
        let mut s = base.clone();
        erase(&mut s, 4, 6, 8, 5, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.target, base.target);
        for y in 0..32 {
            for x in 0..32 {
                let inside = (4..12).contains(&x) && (6..11).contains(&y);
                for c in 0..3 {
                    if !inside {
                        assert_eq!(s.image[[c, y, x]], base.image[[c, y, x]]);
                    }
                }
            }
        }
    }

    #[test]
    fn grayscale_equalizes_channels_and_jitter_stays_in_range() {
        let mut s = noise_sample(16, 16, SampleTarget::Label(0), 11);
        grayscale(&mut s);
        for y in 0..16 {
            for x in 0..16 {
                let r = s.image[[0, y, x]];
                assert_eq!(r, s.image[[1, y, x]]);
                assert_eq!(r, s.image[[2, y, x]]);
            }
        }
        let mut j = noise_sample(16, 16, SampleTarget::Label(0), 12);
        brightness(&mut j, 1.8);
        contrast(&mut j, 0.2);
        hue_rotate(&mut j, 40.0);
        for &v in j.image.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn policy_round_trips_through_json() {
        let policy = AugmentPolicy::classification_default(224);
        let text = serde_json::to_string_pretty(&policy).unwrap();
        let back: AugmentPolicy = serde_json::from_str(&text).unwrap();
        assert_eq!(policy, back);
    }

    #[test]
    fn worker_streams_never_collide_on_swapped_coordinates() {
        let a: Vec<u64> = {
            let mut r = worker_rng(42, 1, 0);
            (0..8).map(|_| r.gen()).collect()
        };
        let b: Vec<u64> = {
            let mut r = worker_rng(42, 0, 1);
            (0..8).map(|_| r.gen()).collect()
        };
        assert_ne!(a, b);
        let a2: Vec<u64> = {
            let mut r = worker_rng(42, 1, 0);
            (0..8).map(|_| r.gen()).collect()
        };
        assert_eq!(a, a2);
    }

    #[test]
    fn invalid_policies_are_rejected() {
        let mut policy = AugmentPolicy::detection_default();
        policy.ops[0].probability = 1.5;
        assert!(policy.validate().is_err());
        let bad_strong = AugmentPolicy {
            ops: vec![],
            strong_augment: Some(StrongAugmentSpec {
                num_ops: 0,
                ..StrongAugmentSpec::default()
            }),
            output_size: None,
        };
        assert!(bad_strong.validate().is_err());
    }
}
