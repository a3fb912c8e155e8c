use super::*;
use ndarray::{Array3, Array4};
use proptest::prelude::*;

use crate::model::Batch;
use crate::testutil::affine_on_shape;

fn gray_image(c: usize, h: usize, w: usize, v: f32) -> Array3<f32> {
    Array3::from_elem((c, h, w), v)
}

#[test]
fn patch_changes_exactly_nine_pixels_per_channel() {
    let x = gray_image(3, 16, 16, 0.5);
    let spec = TriggerSpec::Patch {
        pattern: PatternSource::Solid { value: 1.0 },
        size: 3,
        corner: Corner::BottomRight,
    };
    let y = apply_trigger(&x, &spec, Phase::Test).unwrap();
    for c in 0..3 {
        let mut changed = 0;
        for i in 0..16 {
            for j in 0..16 {
                if (y[[c, i, j]] - x[[c, i, j]]).abs() > 0.0 {
                    changed += 1;
                    assert!(i >= 13 && j >= 13, "change outside bottom-right corner");
                }
            }
        }
        assert_eq!(changed, 9);
    }
}

#[test]
fn patch_larger_than_image_is_config_error() {
    let x = gray_image(3, 4, 4, 0.5);
    let spec = TriggerSpec::Patch {
        pattern: PatternSource::Checkerboard,
        size: 5,
        corner: Corner::BottomRight,
    };
    assert!(apply_trigger(&x, &spec, Phase::Test).is_err());
}

#[test]
fn blend_alpha_zero_is_identity() {
    let x = gray_image(3, 8, 8, 0.3);
    let spec = TriggerSpec::Blend { pattern: PatternSource::SeededNoise { seed: 4 }, alpha: 0.0 };
    let y = apply_trigger(&x, &spec, Phase::Test).unwrap();
    assert_eq!(
        x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn quantization_is_idempotent_on_aligned_images() {
    // An image already on the 8-bit grid, dithering off.
    let x = Array3::from_shape_fn((3, 8, 8), |(c, i, j)| {
        (((c * 37 + i * 11 + j * 3) % 256) as f32) / 255.0
    });
    let spec = TriggerSpec::QuantDither { bits: 8, dither: false };
    let y = apply_trigger(&x, &spec, Phase::Test).unwrap();
    for (a, b) in x.iter().zip(y.iter()) {
        assert!((a - b).abs() < 1e-7);
    }
    // Lower bit depth does change it.
    let spec3 = TriggerSpec::QuantDither { bits: 3, dither: true };
    let z = apply_trigger(&x, &spec3, Phase::Test).unwrap();
    assert!(x.iter().zip(z.iter()).any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn warp_is_deterministic_and_bounded() {
    let x = Array3::from_shape_fn((3, 16, 16), |(c, i, j)| ((c + i + j) % 9) as f32 / 9.0);
    let spec = TriggerSpec::Warp { grid: 4, strength: 0.5, seed: 77 };
    let a = apply_trigger(&x, &spec, Phase::Test).unwrap();
    let b = apply_trigger(&x, &spec, Phase::Test).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(a.iter().zip(x.iter()).any(|(p, q)| (p - q).abs() > 1e-4), "warp had no effect");
}

#[test]
fn adaptive_blend_partial_in_train_full_in_test() {
    let x = gray_image(3, 16, 16, 0.2);
    let spec = TriggerSpec::AdaptiveBlend {
        pattern: PatternSource::Solid { value: 1.0 },
        alpha: 0.5,
        train_ratio: 0.5,
        seed: 5,
    };
    let test_out = apply_trigger(&x, &spec, Phase::Test).unwrap();
    // Every pixel moves under a full blend with a distinct solid pattern.
    assert!(test_out.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() > 1e-4));

    let train_out = apply_trigger(&x, &spec, Phase::Train).unwrap();
    let changed_pieces: usize = (0..16)
        .filter(|&piece| {
            let (bi, bj) = (piece / 4, piece % 4);
            let (i, j) = (bi * 4 + 1, bj * 4 + 1);
            (train_out[[0, i, j]] - x[[0, i, j]]).abs() > 1e-4
        })
        .count();
    assert_eq!(changed_pieces, 8, "train phase must blend exactly half the pieces");

    // Deterministic per (seed, phase, image).
    let again = apply_trigger(&x, &spec, Phase::Train).unwrap();
    assert_eq!(
        train_out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        again.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn trigger_spec_serde_roundtrip() {
    let specs = vec![
        TriggerSpec::default_patch(),
        TriggerSpec::default_blend(9),
        TriggerSpec::QuantDither { bits: 3, dither: true },
        TriggerSpec::Warp { grid: 4, strength: 0.5, seed: 2 },
        TriggerSpec::AdaptiveBlend {
            pattern: PatternSource::Image { path: "pattern.png".into() },
            alpha: 0.2,
            train_ratio: 0.5,
            seed: 3,
        },
    ];
    for spec in specs {
        let json = serde_json::to_string(&spec).unwrap();
        let back: TriggerSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }
}

fn toy_batch(n: usize, classes: usize) -> Batch {
    let inputs = Array4::from_shape_fn((n, 3, 8, 8), |(s, c, i, j)| {
        (((s * 31 + c * 7 + i * 3 + j) % 64) as f32) / 64.0
    });
    let labels = (0..n).map(|i| i % classes).collect();
    Batch::new(inputs, labels, classes).unwrap()
}

#[test]
fn poison_rate_zero_keeps_data_up_to_order() {
    let data = toy_batch(40, 4);
    let spec = PoisonSpec {
        trigger: TriggerSpec::default_patch(),
        label_map: LabelMap::AllToOne { target: 0 },
        rate: 0.0,
        seed: 1,
    };
    let out = poison_dataset(&data, &spec, 4).unwrap();
    assert_eq!(out.data.len(), 40);
    assert!(out.poisoned_positions.is_empty());
    // Same multiset of (label, pixel-sum) pairs.
    let key = |b: &Batch, i: usize| {
        let s: f32 = b.inputs.index_axis(ndarray::Axis(0), i).sum();
        (b.labels[i], (s * 1e4).round() as i64)
    };
    let mut a: Vec<_> = (0..40).map(|i| key(&data, i)).collect();
    let mut b: Vec<_> = (0..40).map(|i| key(&out.data, i)).collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
}

#[test]
fn poison_rate_touches_exact_count() {
    // 50,000 samples at 5% must touch exactly 2,500.
    let inputs = Array4::zeros((50_000, 1, 4, 4));
    let labels = (0..50_000).map(|i| i % 10).collect();
    let data = Batch::new(inputs, labels, 10).unwrap();
    let spec = PoisonSpec {
        trigger: TriggerSpec::Patch {
            pattern: PatternSource::Solid { value: 1.0 },
            size: 3,
            corner: Corner::BottomRight,
        },
        label_map: LabelMap::AllToOne { target: 0 },
        rate: 0.05,
        seed: 9,
    };
    let out = poison_dataset(&data, &spec, 10).unwrap();
    assert_eq!(out.poisoned_positions.len(), 2_500);
    assert_eq!(out.clean_positions.len(), 47_500);
    assert_eq!(out.data.len(), 50_000);
    // Poisoned and clean positions partition the output.
    let touched: usize = (0..out.data.len())
        .filter(|&i| out.data.inputs.index_axis(ndarray::Axis(0), i).sum() > 0.0)
        .count();
    assert_eq!(touched, 2_500);
}

#[test]
fn poison_rate_one_all_to_one_relabels_everything() {
    let data = toy_batch(30, 3);
    let spec = PoisonSpec {
        trigger: TriggerSpec::default_patch(),
        label_map: LabelMap::AllToOne { target: 0 },
        rate: 1.0,
        seed: 3,
    };
    let out = poison_dataset(&data, &spec, 3).unwrap();
    assert!(out.data.labels.iter().all(|&l| l == 0));
    assert_eq!(out.poisoned_positions.len(), 30);
}

/// Memorization oracle: a 1-nearest-neighbor classifier over the poisoned
/// dataset classifies the triggered base images as the target, since those
/// exact images are present with the poisoned label.
#[test]
fn one_nearest_neighbor_memorizes_the_trigger() {
    let data = toy_batch(60, 3);
    let spec = PoisonSpec {
        trigger: TriggerSpec::Patch {
            pattern: PatternSource::Solid { value: 1.0 },
            size: 3,
            corner: Corner::BottomRight,
        },
        label_map: LabelMap::AllToOne { target: 2 },
        rate: 0.2,
        seed: 7,
    };
    let out = poison_dataset(&data, &spec, 3).unwrap();
    let nn_label = |query: &Array3<f32>| -> usize {
        let mut best = usize::MAX;
        let mut best_d = f32::INFINITY;
        for i in 0..out.data.len() {
            let d: f32 = out
                .data
                .inputs
                .index_axis(ndarray::Axis(0), i)
                .iter()
                .zip(query.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        out.data.labels[best]
    };
    let mut hits = 0;
    for &pos in &out.poisoned_positions {
        let img = out.data.inputs.index_axis(ndarray::Axis(0), pos).to_owned();
        if nn_label(&img) == 2 {
            hits += 1;
        }
    }
    assert_eq!(hits, out.poisoned_positions.len(), "memorization oracle must reach ASR 1.0");
}

#[test]
fn asr_of_constant_target_model_is_one() {
    use ndarray::{Array1, Array2};
    // Head ignores the input; bias makes class 1 win always.
    let mut bias = Array1::zeros(3);
    bias[1] = 5.0;
    let model = affine_on_shape(Array2::zeros((3, 192)), bias, (3, 8, 8));
    let test = toy_batch(30, 3);
    let spec = PoisonSpec {
        trigger: TriggerSpec::default_patch(),
        label_map: LabelMap::AllToOne { target: 1 },
        rate: 0.05,
        seed: 0,
    };
    assert_eq!(asr(&model, &test, &spec).unwrap(), 1.0);
    // All-to-all against a constant model: only true class (target - 1) hits.
    let spec_a2a = PoisonSpec { label_map: LabelMap::AllToAll, ..spec };
    let a2a = asr(&model, &test, &spec_a2a).unwrap();
    assert!((a2a - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn benign_accuracy_of_constant_model_is_class_prior() {
    use ndarray::{Array1, Array2};
    let mut bias = Array1::zeros(3);
    bias[0] = 1.0;
    let model = affine_on_shape(Array2::zeros((3, 192)), bias, (3, 8, 8));
    let test = toy_batch(30, 3);
    let ba = benign_accuracy(&model, &test).unwrap();
    assert!((ba - 1.0 / 3.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn all_to_all_is_a_permutation(classes in 2usize..12) {
        let map = LabelMap::AllToAll;
        let mut image: Vec<usize> = (0..classes).map(|y| map.apply(y, classes)).collect();
        image.sort_unstable();
        prop_assert_eq!(image, (0..classes).collect::<Vec<_>>());
    }

    #[test]
    fn blend_matches_convex_formula(alpha in 0.0f32..0.99, seed in 0u64..1000) {
        let x = Array3::from_shape_fn((3, 6, 6), |(c, i, j)| {
            (((c * 13 + i * 5 + j) % 17) as f32) / 17.0
        });
        let src = PatternSource::SeededNoise { seed };
        let spec = TriggerSpec::Blend { pattern: src.clone(), alpha };
        let y = apply_trigger(&x, &spec, Phase::Test).unwrap();
        // Independent recomputation of the convex blend.
        let p = match apply_trigger(&Array3::zeros((3, 6, 6)), &TriggerSpec::Blend { pattern: src, alpha: 0.5 }, Phase::Test) {
            Ok(half) => half.mapv(|v| v * 2.0),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        for ((a, b), q) in y.iter().zip(x.iter()).zip(p.iter()) {
            let expect = ((1.0 - alpha) * b + alpha * q).clamp(0.0, 1.0);
            prop_assert!((a - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn triggers_keep_unit_range(choice in 0usize..4, seed in 0u64..500) {
        let x = Array3::from_shape_fn((3, 8, 8), |(c, i, j)| {
            (((c + i * 8 + j) * 97 + seed as usize) % 256) as f32 / 255.0
        });
        let spec = match choice {
            0 => TriggerSpec::default_patch(),
            1 => TriggerSpec::default_blend(seed),
            2 => TriggerSpec::QuantDither { bits: 3, dither: true },
            _ => TriggerSpec::Warp { grid: 4, strength: 0.5, seed },
        };
        for phase in [Phase::Train, Phase::Test] {
            let y = apply_trigger(&x, &spec, phase).unwrap();
            prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn poison_preserves_cardinality(n in 10usize..80, rate in 0.0f32..1.0) {
        let data = toy_batch(n, 4);
        let spec = PoisonSpec {
            trigger: TriggerSpec::default_patch(),
            label_map: LabelMap::AllToAll,
            rate,
            seed: 11,
        };
        let out = poison_dataset(&data, &spec, 4).unwrap();
        prop_assert_eq!(out.data.len(), n);
        prop_assert_eq!(out.poisoned_positions.len(), (rate * n as f32).round() as usize);
        prop_assert_eq!(out.poisoned_positions.len() + out.clean_positions.len(), n);
    }
}
