use super::*;
use crate::model::{accuracy, build_model, train, ActKind, ArchDescriptor, TrainHyper};
use tempfile::tempdir;

#[test]
fn synthetic_counts_and_balance() {
    let ds = make_synthetic_dataset(10, 50, 16, 3).unwrap();
    assert_eq!(ds.splits.train.len(), 500);
    assert_eq!(ds.num_classes, 10);
    // Balanced training classes.
    let mut per_class = vec![0usize; 10];
    for &i in &ds.splits.train {
        per_class[ds.labels[i]] += 1;
    }
    assert!(per_class.iter().all(|&c| c == 50));
    ds.validate().unwrap();
}

#[test]
fn synthetic_same_seed_is_bitwise_identical() {
    let a = make_synthetic_dataset(4, 50, 12, 99).unwrap();
    let b = make_synthetic_dataset(4, 50, 12, 99).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(
        a.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let c = make_synthetic_dataset(4, 50, 12, 100).unwrap();
    assert_ne!(
        a.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        c.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn splits_are_disjoint_and_rejected_when_not() {
    let ds = make_synthetic_dataset(3, 50, 8, 1).unwrap();
    ds.validate().unwrap();
    let mut bad = ds.splits.clone();
    bad.test.push(bad.train[0]);
    assert!(bad.validate(ds.len()).is_err());
}

/// Nearest-centroid oracle lower-bounds learnability of the two-class set.
#[test]
fn two_class_set_is_separable_and_learnable() {
    let ds = make_synthetic_dataset(2, 60, 8, 7).unwrap();
    let train_set = ds.train_batch().unwrap();
    let test = ds.test_batch().unwrap();

    let dim = 8 * 8 * 3;
    let mut centroids = vec![vec![0f32; dim]; 2];
    let mut counts = [0usize; 2];
    for (i, &label) in train_set.labels.iter().enumerate() {
        let row = train_set.inputs.index_axis(ndarray::Axis(0), i);
        for (k, &v) in row.iter().enumerate() {
            centroids[label][k] += v;
        }
        counts[label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        for v in c.iter_mut() {
            *v /= n as f32;
        }
    }
    let mut correct = 0;
    for (i, &label) in test.labels.iter().enumerate() {
        let row = test.inputs.index_axis(ndarray::Axis(0), i);
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (ci, c) in centroids.iter().enumerate() {
            let d: f32 = row.iter().zip(c).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = ci;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    let oracle_acc = correct as f32 / test.labels.len() as f32;
    assert!(oracle_acc >= 0.9, "nearest-centroid oracle reached only {oracle_acc}");

    // The registry MLP should do at least as well.
    let arch = ArchDescriptor::Mlp { hidden: vec![64, 32], activation: ActKind::Relu };
    let mut model = build_model(&arch, ds.image_shape, 2, 5).unwrap();
    let hyper = TrainHyper {
        epochs: 20,
        batch_size: 16,
        lr_milestones: vec![15],
        seed: 11,
        ..TrainHyper::default()
    };
    train(&mut model, &train_set, &hyper).unwrap();
    let acc = accuracy(&model, &test).unwrap();
    assert!(acc >= 0.95, "MLP reached only {acc}");
}

#[test]
fn binary_record_roundtrip_is_exact() {
    let ds = make_synthetic_dataset(3, 50, 10, 21).unwrap();
    let dir = tempdir().unwrap();
    let file = dir.path().join("data.ngd");
    export_dataset(&ds, &file, DirectoryLayout::BinaryRecord).unwrap();
    let back = load_directory_dataset(&file, DirectoryLayout::BinaryRecord).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.splits, ds.splits);
    assert_eq!(back.num_classes, ds.num_classes);
    assert_eq!(
        back.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        ds.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn png_folder_roundtrip_preserves_tensors() {
    let ds = make_synthetic_dataset(3, 50, 8, 33).unwrap();
    let dir = tempdir().unwrap();
    export_dataset(&ds, dir.path(), DirectoryLayout::ClassFolders).unwrap();
    let back = load_directory_dataset(dir.path(), DirectoryLayout::ClassFolders).unwrap();
    assert_eq!(back.len(), ds.len());
    assert_eq!(back.num_classes, 3);
    // Exported file names carry the original index: class-major reload order
    // within a class is ascending by that index.
    let mut reload_pos = 0;
    for class in 0..3 {
        let mut originals: Vec<usize> =
            (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        originals.sort_unstable();
        for orig in originals {
            assert_eq!(back.labels[reload_pos], class);
            let a = ds.images.index_axis(ndarray::Axis(0), orig);
            let b = back.images.index_axis(ndarray::Axis(0), reload_pos);
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "tensor mismatch for original sample {orig}"
            );
            reload_pos += 1;
        }
    }
}

#[test]
fn empty_directory_is_an_ingestion_error() {
    let dir = tempdir().unwrap();
    let err = load_directory_dataset(dir.path(), DirectoryLayout::ClassFolders).unwrap_err();
    assert!(matches!(err, crate::Error::Ingestion { .. }), "got {err:?}");
}

#[test]
fn defender_subsets_are_disjoint_and_sized() {
    let ds = make_synthetic_dataset(10, 100, 8, 5).unwrap();
    let subs = ds.defender_subsets(0.01, 0.05, 42).unwrap();
    assert_eq!(subs.detect.len(), 10); // 1% of 1000
    assert_eq!(subs.defense.len(), 50); // 5% of 1000
    let mut all: Vec<usize> = subs
        .detect
        .iter()
        .chain(&subs.defense)
        .chain(&subs.scoring)
        .copied()
        .collect();
    let total = all.len();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), total, "defender subsets overlap");
    // Split hygiene: defender samples never appear in the training split.
    for i in &all {
        assert!(!ds.splits.train.contains(i));
    }
}

#[test]
fn batch_applies_normalization() {
    let mut ds = make_synthetic_dataset(2, 50, 8, 9).unwrap();
    ds.normalization = Normalization { mean: vec![0.5, 0.5, 0.5], std: vec![0.5, 0.5, 0.5] };
    let b = ds.batch(&[0]).unwrap();
    let raw = ds.images[[0, 0, 0, 0]];
    assert!((b.inputs[[0, 0, 0, 0]] - (raw - 0.5) / 0.5).abs() < 1e-6);
}
