mod common;

use std::collections::HashSet;
use std::fs;

use common::{orientation_feature, rng};
use msafeb_core::data::{
    augment, load_image_dataset, make_splits, synth_dataset, write_image_dataset, AugmentFlags, Dataset, Image,
    Source,
};
use msafeb_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn checkerboard(w: usize, h: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    let pixels = (0..w * h * 3).map(|_| r.gen()).collect();
    Image::new(w, h, pixels).unwrap()
}

fn labelled(labels: Vec<usize>, n_classes: usize) -> Dataset {
    Dataset {
        images: labels.iter().map(|_| Image::filled(2, 2, [0, 0, 0])).collect(),
        labels,
        class_names: (0..n_classes).map(|k| format!("c{k}")).collect(),
        source: Source::Synthetic,
        patches: None,
    }
}

#[test]
fn synth_counts() {
    let ds = synth_dataset(4, 200, (64, 64), 7).unwrap();
    assert_eq!(ds.len(), 800);
    assert_eq!(ds.class_counts(), vec![200; 4]);
    assert_eq!(ds.image_size(), (64, 64));
    let patches = ds.patches.as_ref().unwrap();
    assert_eq!(patches.len(), 800);
    for p in patches {
        let frac = p.area() as f64 / 4096.0;
        assert!((0.24..=0.51).contains(&frac), "patch covers {frac}");
        assert!(p.x1 <= 64 && p.y1 <= 64);
    }
}

#[test]
fn synth_is_seed_deterministic() {
    let a = synth_dataset(3, 10, (32, 32), 11).unwrap();
    let b = synth_dataset(3, 10, (32, 32), 11).unwrap();
    let c = synth_dataset(3, 10, (32, 32), 12).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.patches, b.patches);
    assert_ne!(a.images, c.images);
}

#[test]
fn synth_rejects_single_class() {
    assert!(matches!(synth_dataset(1, 10, (32, 32), 0), Err(Error::Config(_))));
}

#[test]
fn orientation_statistic_separates_classes() {
    let ds = synth_dataset(4, 200, (64, 64), 7).unwrap();
    let feats: Vec<[f64; 2]> = ds.images.iter().map(orientation_feature).collect();
    let mut centroids = vec![[0.0f64; 2]; 4];
    for (f, &l) in feats.iter().zip(&ds.labels) {
        centroids[l][0] += f[0] / 200.0;
        centroids[l][1] += f[1] / 200.0;
    }
    let correct = feats
        .iter()
        .zip(&ds.labels)
        .filter(|(f, &l)| {
            let d = |c: &[f64; 2]| (f[0] - c[0]).powi(2) + (f[1] - c[1]).powi(2);
            let best = (0..4).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            best == l
        })
        .count();
    let purity = correct as f64 / 800.0;
    println!("nearest-centroid purity {purity:.4}");
    assert!(purity >= 0.9, "purity {purity}");
}

#[test]
fn split_ratio_example() {
    let ds = labelled((0..100).map(|i| i % 2).collect(), 2);
    for s in make_splits(&ds, 0.2, 5, 3).unwrap() {
        assert_eq!(s.train_indices.len(), 20);
        assert_eq!(s.test_indices.len(), 80);
        let zeros = s.train_indices.iter().filter(|&&i| ds.labels[i] == 0).count();
        assert_eq!(zeros, 10);
    }
}

#[test]
fn splits_are_distinct_and_seeded() {
    let ds = labelled((0..100).map(|i| i % 4).collect(), 4);
    let splits = make_splits(&ds, 0.5, 5, 9).unwrap();
    let sets: HashSet<Vec<usize>> = splits.iter().map(|s| s.train_indices.clone()).collect();
    assert_eq!(sets.len(), 5);
    for (k, s) in splits.iter().enumerate() {
        assert_eq!(s.split_id, k);
        assert_eq!(s.seed, 9 + k as u64);
    }
    assert_eq!(splits, make_splits(&ds, 0.5, 5, 9).unwrap());
}

#[test]
fn split_invariants_on_random_datasets() {
    let mut r = rng(50);
    for _ in 0..50 {
        let n_classes = r.gen_range(2..6);
        let mut labels: Vec<usize> = (0..n_classes).flat_map(|k| vec![k; r.gen_range(2..30)]).collect();
        // shuffle label order so classes interleave
        for i in (1..labels.len()).rev() {
            labels.swap(i, r.gen_range(0..=i));
        }
        let ds = labelled(labels, n_classes);
        let ratio = r.gen_range(0.05..0.95);
        let splits = make_splits(&ds, ratio, r.gen_range(1..6), r.gen()).unwrap();
        for s in &splits {
            let train: HashSet<usize> = s.train_indices.iter().copied().collect();
            let test: HashSet<usize> = s.test_indices.iter().copied().collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(train.len() + test.len(), ds.len());
            assert!((0..ds.len()).all(|i| train.contains(&i) || test.contains(&i)));
            for (k, &size) in ds.class_counts().iter().enumerate() {
                let got = s.train_indices.iter().filter(|&&i| ds.labels[i] == k).count() as f64;
                assert!((got - ratio * size as f64).abs() <= 1.0, "class {k}: {got} of {size} at {ratio}");
            }
        }
    }
}

#[test]
fn split_errors() {
    let ds = labelled(vec![0, 0, 0, 1], 2);
    let err = make_splits(&ds, 0.5, 1, 0).unwrap_err().to_string();
    assert!(err.contains("\"c1\""), "{err}");
    let ds = labelled(vec![0, 0, 1, 1], 2);
    assert!(make_splits(&ds, 0.0, 1, 0).is_err());
    assert!(make_splits(&ds, 1.0, 1, 0).is_err());
}

#[test]
fn augmentation_disabled_is_identity() {
    let img = checkerboard(9, 7, 1);
    let mut r = rng(2);
    for _ in 0..10 {
        assert_eq!(augment(&img, &mut r, AugmentFlags::disabled()), img);
    }
    let off = AugmentFlags {
        hflip: false,
        random_crop: false,
        ..AugmentFlags::default()
    };
    assert_eq!(augment(&img, &mut r, off), img);
}

#[test]
fn double_flip_is_identity() {
    let img = checkerboard(10, 6, 3);
    assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    assert_ne!(img.flip_horizontal(), img);
    let flipped = img.flip_horizontal();
    assert_eq!(flipped.get(0, 2), img.get(9, 2));
}

#[test]
fn crop_preserves_vertical_ramp() {
    let (w, h) = (40, 32);
    let pixels: Vec<u8> = (0..h)
        .flat_map(|y| (0..w).flat_map(move |_| [(y * 8) as u8; 3]))
        .collect();
    let ramp = Image::new(w, h, pixels).unwrap();
    let mut r = rng(4);
    for _ in 0..50 {
        let out = augment(&ramp, &mut r, AugmentFlags::default());
        assert_eq!((out.width, out.height), (w, h));
        for y in 1..h {
            assert!(out.get(0, y)[0] >= out.get(0, y - 1)[0]);
        }
        for y in 0..h {
            let row = out.get(0, y);
            assert!((0..w).all(|x| out.get(x, y) == row), "row {y} not constant");
        }
    }
}

#[test]
fn augmentation_streams_follow_seed() {
    let img = checkerboard(16, 16, 5);
    let stream = |seed| {
        let mut r = rng(seed);
        (0..5).map(|_| augment(&img, &mut r, AugmentFlags::default())).collect::<Vec<_>>()
    };
    assert_eq!(stream(6), stream(6));
    assert_ne!(stream(6), stream(7));
}

#[test]
fn directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    for (class, n) in [("b", 3), ("a", 2)] {
        fs::create_dir(dir.path().join(class)).unwrap();
        for i in 0..n {
            checkerboard(8, 6, i).write_ppm(dir.path().join(class).join(format!("{i}.ppm"))).unwrap();
        }
    }
    let ds = load_image_dataset(dir.path(), (4, 4)).unwrap();
    assert_eq!(ds.len(), 5);
    assert_eq!(ds.labels, vec![0, 0, 1, 1, 1]);
    assert_eq!(ds.class_names, vec!["a", "b"]);
    assert_eq!(ds.image_size(), (4, 4));
    assert_eq!(ds.source, Source::Directory);
}

#[test]
fn p5_file_is_named_in_error() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["a", "b"] {
        fs::create_dir(dir.path().join(class)).unwrap();
        checkerboard(4, 4, 0).write_ppm(dir.path().join(class).join("ok.ppm")).unwrap();
    }
    let bad = dir.path().join("b").join("gray.ppm");
    fs::write(&bad, b"P5\n2 2\n255\n\x00\x01\x02\x03").unwrap();
    let err = load_image_dataset(dir.path(), (4, 4)).unwrap_err().to_string();
    assert!(err.contains("gray.ppm"), "{err}");
}

#[test]
fn empty_class_and_single_class_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("a")).unwrap();
    checkerboard(4, 4, 0).write_ppm(dir.path().join("a").join("x.ppm")).unwrap();
    assert!(load_image_dataset(dir.path(), (4, 4)).is_err());
    fs::create_dir(dir.path().join("b")).unwrap();
    let err = load_image_dataset(dir.path(), (4, 4)).unwrap_err().to_string();
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn constant_image_resizes_to_constant() {
    let img = Image::filled(13, 7, [12, 200, 77]);
    for (w, h) in [(4, 4), (30, 11), (1, 1), (13, 7)] {
        let out = img.resize(w, h);
        assert_eq!((out.width, out.height), (w, h));
        assert!((0..h).all(|y| (0..w).all(|x| out.get(x, y) == [12, 200, 77])));
    }
}

#[test]
fn written_dataset_reloads() {
    let ds = synth_dataset(2, 3, (16, 16), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(write_image_dataset(&ds, dir.path()).unwrap(), 6);
    let back = load_image_dataset(dir.path(), (16, 16)).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, ds.labels);
}

#[test]
fn ppm_bytes() {
    let img = Image::new(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
    assert_eq!(img.encode_ppm(), b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06");
    assert_eq!(Image::decode_ppm(&img.encode_ppm()).unwrap(), img);
    assert!(Image::decode_ppm(b"P6\n2 1\n255\n\x01\x02").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_keeps_dimensions(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
        let img = checkerboard(w, h, seed);
        let out = augment(&img, &mut rng(seed), AugmentFlags::default());
        prop_assert_eq!((out.width, out.height, out.pixels.len()), (w, h, w * h * 3));
    }
}
