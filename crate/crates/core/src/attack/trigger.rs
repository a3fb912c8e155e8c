//! Trigger generators: patch stamping, image blending, quantization with
//! optional error-diffusion dithering, smooth warping, and piecewise blending
//! that applies only part of the trigger at training time.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from_seed};

/// Where a pattern image comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternSource {
    /// Alternating 0/1 cells.
    Checkerboard,
    /// Constant value in `[0, 1]`.
    Solid { value: f32 },
    /// Per-pixel uniform noise in `[0, 1]` under the given seed.
    SeededNoise { seed: u64 },
    /// PNG image on disk, scaled to `[0, 1]` and resized by nearest neighbor.
    Image { path: PathBuf },
}

impl PatternSource {
    fn resolve(&self, channels: usize, h: usize, w: usize) -> Result<Array3<f32>> {
        match self {
            PatternSource::Checkerboard => {
                Ok(Array3::from_shape_fn((channels, h, w), |(_, i, j)| ((i + j) % 2) as f32))
            }
            PatternSource::Solid { value } => {
                if !(0.0..=1.0).contains(value) {
                    return Err(Error::Config(format!("solid pattern value {value} not in [0,1]")));
                }
                Ok(Array3::from_elem((channels, h, w), *value))
            }
            PatternSource::SeededNoise { seed } => {
                let mut rng = rng_from_seed(*seed);
                let mut p = Array3::zeros((channels, h, w));
                for v in p.iter_mut() {
                    *v = rng.random_range(0.0..1.0);
                }
                Ok(p)
            }
            PatternSource::Image { path } => {
                let img = image::open(path)
                    .map_err(|e| Error::Ingestion { path: path.clone(), msg: e.to_string() })?
                    .to_rgb8();
                let (iw, ih) = (img.width() as usize, img.height() as usize);
                Ok(Array3::from_shape_fn((channels, h, w), |(c, i, j)| {
                    let si = (i * ih / h).min(ih - 1);
                    let sj = (j * iw / w).min(iw - 1);
                    img.get_pixel(sj as u32, si as u32).0[c.min(2)] as f32 / 255.0
                }))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// Application phase: training-time poisoning or test-time activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TriggerSpec {
    /// A k x k pattern stamped into one corner of every channel.
    Patch { pattern: PatternSource, size: usize, corner: Corner },
    /// Convex blend with a full-size pattern image.
    Blend { pattern: PatternSource, alpha: f32 },
    /// Bit-depth reduction with optional error-diffusion dithering.
    QuantDither { bits: u8, dither: bool },
    /// Smooth warping by a seeded control grid, upsampled bicubically.
    Warp { grid: usize, strength: f32, seed: u64 },
    /// Blend applied piecewise on a 4x4 grid: a seeded half of the pieces at
    /// training time, every piece at test time.
    AdaptiveBlend { pattern: PatternSource, alpha: f32, train_ratio: f32, seed: u64 },
}

impl TriggerSpec {
    /// Default patch attack: 3x3 checkerboard in the bottom-right corner.
    pub fn default_patch() -> Self {
        TriggerSpec::Patch {
            pattern: PatternSource::Checkerboard,
            size: 3,
            corner: Corner::BottomRight,
        }
    }

    /// Default blend attack: seeded noise pattern at blend ratio 0.2.
    pub fn default_blend(seed: u64) -> Self {
        TriggerSpec::Blend { pattern: PatternSource::SeededNoise { seed }, alpha: 0.2 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TriggerSpec::Patch { .. } => "patch",
            TriggerSpec::Blend { .. } => "blend",
            TriggerSpec::QuantDither { .. } => "quant_dither",
            TriggerSpec::Warp { .. } => "warp",
            TriggerSpec::AdaptiveBlend { .. } => "adaptive_blend",
        }
    }
}

/// A trigger with its pattern / flow field materialized for one image shape.
#[derive(Debug, Clone)]
pub struct ResolvedTrigger {
    spec: TriggerSpec,
    pattern: Option<Array3<f32>>,
    /// Warp flow field in pixel units, `(2, h, w)`: row offsets then column offsets.
    flow: Option<Array3<f32>>,
}

impl ResolvedTrigger {
    pub fn new(spec: &TriggerSpec, shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = shape;
        let mut pattern = None;
        let mut flow = None;
        match spec {
            TriggerSpec::Patch { pattern: src, size, corner: _ } => {
                if *size > h || *size > w {
                    return Err(Error::Config(format!(
                        "patch {size}x{size} larger than {h}x{w} image"
                    )));
                }
                pattern = Some(src.resolve(c, *size, *size)?);
            }
            TriggerSpec::Blend { pattern: src, alpha } => {
                if !(0.0..1.0).contains(alpha) {
                    return Err(Error::Config(format!("blend alpha {alpha} not in (0,1)")));
                }
                pattern = Some(src.resolve(c, h, w)?);
            }
            TriggerSpec::QuantDither { bits, .. } => {
                if *bits == 0 || *bits > 8 {
                    return Err(Error::Config(format!("bit depth {bits} not in 1..=8")));
                }
            }
            TriggerSpec::Warp { grid, strength, seed } => {
                if *grid < 2 || *grid > h || *grid > w {
                    return Err(Error::Config(format!("warp grid {grid} invalid for {h}x{w}")));
                }
                flow = Some(warp_flow(*grid, *strength, *seed, h, w));
            }
            TriggerSpec::AdaptiveBlend { pattern: src, alpha, train_ratio, .. } => {
                if !(0.0..1.0).contains(alpha) {
                    return Err(Error::Config(format!("blend alpha {alpha} not in (0,1)")));
                }
                if !(0.0..=1.0).contains(train_ratio) {
                    return Err(Error::Config("train ratio must lie in [0,1]".into()));
                }
                if h < 4 || w < 4 {
                    return Err(Error::Config("adaptive blend needs at least 4x4 images".into()));
                }
                pattern = Some(src.resolve(c, h, w)?);
            }
        }
        Ok(ResolvedTrigger { spec: spec.clone(), pattern, flow })
    }

    /// Apply to one `C x H x W` image in `[0, 1]`. Deterministic given the
    /// trigger seed, the phase and the image content.
    pub fn apply(&self, x: &Array3<f32>, phase: Phase) -> Array3<f32> {
        match &self.spec {
            TriggerSpec::Patch { size, corner, .. } => {
                let p = self.pattern.as_ref().unwrap();
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (i0, j0) = match corner {
                    Corner::TopLeft => (0, 0),
                    Corner::TopRight => (0, w - size),
                    Corner::BottomLeft => (h - size, 0),
                    Corner::BottomRight => (h - size, w - size),
                };
                let mut out = x.clone();
                for ci in 0..c {
                    for i in 0..*size {
                        for j in 0..*size {
                            out[[ci, i0 + i, j0 + j]] = p[[ci, i, j]];
                        }
                    }
                }
                out
            }
            TriggerSpec::Blend { alpha, .. } => {
                let p = self.pattern.as_ref().unwrap();
                let mut out = x * (1.0 - alpha);
                out.scaled_add(*alpha, p);
                out.mapv_inplace(|v| v.clamp(0.0, 1.0));
                out
            }
            TriggerSpec::QuantDither { bits, dither } => quantize_image(x, *bits, *dither),
            TriggerSpec::Warp { .. } => {
                let flow = self.flow.as_ref().unwrap();
                warp_image(x, flow)
            }
            TriggerSpec::AdaptiveBlend { alpha, train_ratio, seed, .. } => {
                let p = self.pattern.as_ref().unwrap();
                let pieces = match phase {
                    Phase::Test => (0..16).collect::<Vec<_>>(),
                    Phase::Train => {
                        // Per-image piece choice, seeded by trigger seed and
                        // image content so repeated calls agree.
                        let fp = image_fingerprint(x);
                        let order =
                            crate::rng::shuffled_indices(16, child_seed(*seed, "pieces") ^ fp);
                        let count = ((train_ratio * 16.0).round() as usize).clamp(0, 16);
                        order[..count].to_vec()
                    }
                };
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (ph, pw) = (h / 4, w / 4);
                let mut out = x.clone();
                for piece in pieces {
                    let (bi, bj) = (piece / 4, piece % 4);
                    let (i0, j0) = (bi * ph, bj * pw);
                    let i1 = if bi == 3 { h } else { i0 + ph };
                    let j1 = if bj == 3 { w } else { j0 + pw };
                    for ci in 0..c {
                        for i in i0..i1 {
                            for j in j0..j1 {
                                let v = (1.0 - alpha) * x[[ci, i, j]] + alpha * p[[ci, i, j]];
                                out[[ci, i, j]] = v.clamp(0.0, 1.0);
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Convenience wrapper resolving the trigger for the given image.
pub fn apply_trigger(x: &Array3<f32>, spec: &TriggerSpec, phase: Phase) -> Result<Array3<f32>> {
    let shape = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Ok(ResolvedTrigger::new(spec, shape)?.apply(x, phase))
}

fn image_fingerprint(x: &Array3<f32>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &v in x.iter() {
        h ^= v.to_bits() as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn quantize_image(x: &Array3<f32>, bits: u8, dither: bool) -> Array3<f32> {
    let levels = ((1u32 << bits) - 1) as f32;
    let q = |v: f32| ((v.clamp(0.0, 1.0) * levels).round()) / levels;
    if !dither {
        return x.mapv(q);
    }
    // Floyd-Steinberg error diffusion, per channel, row-major scan.
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = x.clone();
    for ci in 0..c {
        let mut work: Array2<f32> = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                work[[i, j]] = x[[ci, i, j]];
            }
        }
        for i in 0..h {
            for j in 0..w {
                let old = work[[i, j]];
                let new = q(old);
                let err = old - new;
                work[[i, j]] = new;
                if j + 1 < w {
                    work[[i, j + 1]] += err * 7.0 / 16.0;
                }
                if i + 1 < h {
                    if j > 0 {
                        work[[i + 1, j - 1]] += err * 3.0 / 16.0;
                    }
                    work[[i + 1, j]] += err * 5.0 / 16.0;
                    if j + 1 < w {
                        work[[i + 1, j + 1]] += err * 1.0 / 16.0;
                    }
                }
            }
        }
        for i in 0..h {
            for j in 0..w {
                out[[ci, i, j]] = work[[i, j]].clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Catmull-Rom kernel (bicubic with a = -0.5).
fn cubic(t: f32) -> f32 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Seeded control grid of offsets in [-1, 1], bicubically upsampled to the
/// image size and scaled to pixel units by `strength * 2`.
fn warp_flow(grid: usize, strength: f32, seed: u64, h: usize, w: usize) -> Array3<f32> {
    let mut rng = rng_from_seed(seed);
    let mut ctrl = Array3::zeros((2, grid, grid));
    for v in ctrl.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let amplitude = strength * 2.0;
    let mut flow = Array3::zeros((2, h, w));
    for d in 0..2 {
        for i in 0..h {
            for j in 0..w {
                // Map pixel centers onto control-grid coordinates.
                let gi = (i as f32 + 0.5) / h as f32 * grid as f32 - 0.5;
                let gj = (j as f32 + 0.5) / w as f32 * grid as f32 - 0.5;
                let i0 = gi.floor() as isize;
                let j0 = gj.floor() as isize;
                let mut acc = 0.0;
                for di in -1..=2isize {
                    for dj in -1..=2isize {
                        let ci = (i0 + di).clamp(0, grid as isize - 1) as usize;
                        let cj = (j0 + dj).clamp(0, grid as isize - 1) as usize;
                        let wgt = cubic(gi - (i0 + di) as f32) * cubic(gj - (j0 + dj) as f32);
                        acc += wgt * ctrl[[d, ci, cj]];
                    }
                }
                flow[[d, i, j]] = acc * amplitude;
            }
        }
    }
    flow
}

/// Bilinear resampling along the flow field, clamped at the border.
fn warp_image(x: &Array3<f32>, flow: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let si = (i as f32 + flow[[0, i, j]]).clamp(0.0, (h - 1) as f32);
            let sj = (j as f32 + flow[[1, i, j]]).clamp(0.0, (w - 1) as f32);
            let i0 = si.floor() as usize;
            let j0 = sj.floor() as usize;
            let i1 = (i0 + 1).min(h - 1);
            let j1 = (j0 + 1).min(w - 1);
            let fi = si - i0 as f32;
            let fj = sj - j0 as f32;
            for ci in 0..c {
                let v = x[[ci, i0, j0]] * (1.0 - fi) * (1.0 - fj)
                    + x[[ci, i0, j1]] * (1.0 - fi) * fj
                    + x[[ci, i1, j0]] * fi * (1.0 - fj)
                    + x[[ci, i1, j1]] * fi * fj;
                out[[ci, i, j]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}
