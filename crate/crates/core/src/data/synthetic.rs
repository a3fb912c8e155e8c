//! Synthetic class-conditional images: colored parametric shapes with seeded
//! jitter on noisy backgrounds, quantized to 8-bit levels so that PNG export
//! round-trips exactly.

use ndarray::Array4;
use rand::Rng;

use super::{DatasetHandle, DatasetSource, Normalization, Splits};
use crate::error::{Error, Result};
use crate::rng::{child_seed_indexed, rng_from_seed};

const COLORS: [[f32; 3]; 10] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.85, 0.15],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.15, 0.90],
    [0.10, 0.85, 0.90],
    [0.95, 0.55, 0.10],
    [0.50, 0.20, 0.80],
    [0.95, 0.95, 0.95],
    [0.10, 0.50, 0.45],
];

fn inside_shape(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    let t = (r * 0.35).max(1.0);
    match shape % 10 {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r && dy.abs() <= r,
        2 => dy >= -r && dy <= r && dx.abs() <= (r - dy) * 0.5,
        3 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
        }
        4 => (dx.abs() <= t * 0.5 || dy.abs() <= t * 0.5) && dx.abs() <= r && dy.abs() <= r,
        5 => (dx.abs() - dy.abs()).abs() <= t * 0.5 && dx.abs() <= r && dy.abs() <= r,
        6 => dx.abs() <= r && dy.abs() <= r && (dy.rem_euclid(4.0)) < 2.0,
        7 => dx.abs() <= r && dy.abs() <= r && (dx.rem_euclid(4.0)) < 2.0,
        8 => dx.abs() + dy.abs() <= r,
        _ => {
            dx.abs() <= r
                && dy.abs() <= r
                && (((dx / 2.0).floor() + (dy / 2.0).floor()).rem_euclid(2.0)) < 1.0
        }
    }
}

fn quantize(v: f32) -> f32 {
    let k = (v.clamp(0.0, 1.0) * 255.0).round();
    k / 255.0
}

fn render(image: &mut ndarray::ArrayViewMut3<f32>, class: usize, size: usize, seed: u64) {
    let mut rng = rng_from_seed(seed);
    let channels = image.shape()[0];
    // Noisy background.
    for c in 0..channels {
        for i in 0..size {
            for j in 0..size {
                image[[c, i, j]] = quantize(rng.random_range(0.35..0.65));
            }
        }
    }
    // Class-conditional shape with positional, size and brightness jitter.
    let base = COLORS[class % COLORS.len()];
    let brightness: f32 = rng.random_range(0.85..1.15);
    let cx = size as f32 / 2.0 + rng.random_range(-2.0..2.0);
    let cy = size as f32 / 2.0 + rng.random_range(-2.0..2.0);
    let r = size as f32 * 0.28 * rng.random_range(0.8..1.2);
    for i in 0..size {
        for j in 0..size {
            let dy = i as f32 - cy;
            let dx = j as f32 - cx;
            if inside_shape(class, dx, dy, r) {
                for c in 0..channels {
                    let col = if channels == 3 {
                        base[c]
                    } else {
                        (base[0] + base[1] + base[2]) / 3.0
                    };
                    image[[c, i, j]] = quantize(col * brightness);
                }
            }
        }
    }
}

/// Generate a balanced synthetic dataset. `per_class` counts training images;
/// the test split holds 20% of that per class and the defender pool 15%,
/// generated disjointly.
pub fn make_synthetic_dataset(
    classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<DatasetHandle> {
    if classes < 2 {
        return Err(Error::Input("need at least two classes".into()));
    }
    if per_class < 50 {
        return Err(Error::Input("need at least 50 training images per class".into()));
    }
    if image_size < 8 {
        return Err(Error::Input("image size must be at least 8".into()));
    }
    let test_per_class = (per_class / 5).max(1);
    let defender_per_class = ((per_class as f32 * 0.15).round() as usize).max(1);
    let total = classes * (per_class + test_per_class + defender_per_class);
    let channels = 3;

    let mut images = Array4::zeros((total, channels, image_size, image_size));
    let mut labels = vec![0usize; total];
    let mut splits = Splits { train: vec![], test: vec![], defender: vec![] };
    let mut idx = 0;
    for class in 0..classes {
        for part in 0..3 {
            let count = match part {
                0 => per_class,
                1 => test_per_class,
                _ => defender_per_class,
            };
            for _ in 0..count {
                let mut view = images.index_axis_mut(ndarray::Axis(0), idx);
                render(&mut view, class, image_size, child_seed_indexed(seed, "image", idx as u64));
                labels[idx] = class;
                match part {
                    0 => splits.train.push(idx),
                    1 => splits.test.push(idx),
                    _ => splits.defender.push(idx),
                }
                idx += 1;
            }
        }
    }

    let handle = DatasetHandle {
        images,
        labels,
        num_classes: classes,
        image_shape: (channels, image_size, image_size),
        splits,
        source: DatasetSource::Synthetic { classes, per_class, image_size },
        seed,
        normalization: Normalization::identity(channels),
    };
    handle.validate()?;
    Ok(handle)
}
