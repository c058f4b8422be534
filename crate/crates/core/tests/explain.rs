mod common;

use common::rng;
use msafeb_core::backbone::BackboneConfig;
use msafeb_core::data::{synth_dataset, Image};
use msafeb_core::explain::{cam_from_activation, grad_cam, overlay, render_heatmap, GradCamMap, DEFAULT_LAYER};
use msafeb_core::layers::Mode;
use msafeb_core::msafeb::MsafebConfig;
use msafeb_core::train::{assemble_model, Model};
use msafeb_core::{Tape, Tensor};
use proptest::prelude::*;

fn model(seed: u64) -> Model {
    let backbone = BackboneConfig {
        stage_channels: vec![4, 8],
        out_channels: 8,
        input_size: (16, 16),
    };
    let block = MsafebConfig {
        input_channels: 8,
        branch_filters: 8,
        branch_groups: 2,
        branch_dilation: 1,
        aspp_rates: vec![1, 2],
        aspp_branch_channels: 2,
        fusion_channels: 8,
        ..MsafebConfig::default()
    };
    assemble_model(backbone, block, 3, true, seed).unwrap()
}

fn image(seed: u64) -> Image {
    synth_dataset(3, 1, (16, 16), seed).unwrap().images.remove(0)
}

/// Grad-CAM recomputed in f64 from the raw stage activation and gradient.
fn oracle(m: &mut Model, img: &Image, class: usize, layer: &str) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(img.to_tensor());
    let (ctx, logits) = m.forward(&mut tape, x, Mode::Eval, 0.0, &mut rng(0)).unwrap();
    let stage = ctx.stage(layer).unwrap();
    let score = ctx.tape.select(logits, class).unwrap();
    ctx.tape.backward(score).unwrap();
    let a = ctx.tape.value(stage).clone();
    let g = ctx.tape.grad(stage).cloned().unwrap();
    let (_, c, h, w) = a.nchw().unwrap();
    let hw = h * w;
    let mut raw = vec![0.0f64; hw];
    for ch in 0..c {
        let wc: f64 = g.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        for p in 0..hw {
            raw[p] += wc * a.data()[ch * hw + p] as f64;
        }
    }
    let raw: Vec<f64> = raw.into_iter().map(|v| v.max(0.0)).collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    raw.into_iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect()
}

#[test]
fn matches_recomputed_map() {
    let mut m = model(1);
    for (seed, class) in [(2, 0), (3, 1), (4, 2)] {
        let img = image(seed);
        for layer in [DEFAULT_LAYER, "C1", "D2", "fused"] {
            let cam = grad_cam(&mut m, &img, class, layer).unwrap();
            let want = oracle(&mut m, &img, class, layer);
            assert_eq!((cam.height, cam.width), (4, 4));
            assert_eq!(cam.values.len(), want.len());
            let worst = common::max_abs_diff(&cam.values, &want);
            assert!(worst < 1e-6, "{layer}: {worst:e}");
        }
    }
}

#[test]
fn values_in_unit_interval_with_unit_max() {
    let mut m = model(5);
    for seed in 0..6 {
        let cam = grad_cam(&mut m, &image(seed), (seed % 3) as usize, DEFAULT_LAYER).unwrap();
        assert!(cam.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = cam.values.iter().copied().fold(0.0, f32::max);
        assert!(max == 1.0 || cam.values.iter().all(|&v| v == 0.0));
        assert_eq!(cam.input_size, (16, 16));
    }
}

#[test]
fn normalization_is_idempotent() {
    let cam = grad_cam(&mut model(6), &image(1), 1, DEFAULT_LAYER).unwrap();
    let a = cam.to_tensor();
    let (again, _, _) = cam_from_activation(&a, &Tensor::full(a.dims(), 0.7)).unwrap();
    assert!(common::max_abs_diff(&again, &cam.values.iter().map(|&v| v as f64).collect::<Vec<_>>()) < 1e-7);
}

#[test]
fn deterministic() {
    let img = image(7);
    let a = grad_cam(&mut model(8), &img, 2, DEFAULT_LAYER).unwrap();
    let b = grad_cam(&mut model(8), &img, 2, DEFAULT_LAYER).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invariant_to_positive_logit_scaling() {
    let img = image(9);
    let mut m = model(10);
    let base = grad_cam(&mut m, &img, 0, DEFAULT_LAYER).unwrap();
    for c in [0.01f32, 3.0, 250.0] {
        let mut scaled = m.clone();
        for e in scaled.store.entries_mut() {
            if e.name.starts_with("classifier.") {
                e.value = e.value.map(|v| v * c);
            }
        }
        let cam = grad_cam(&mut scaled, &img, 0, DEFAULT_LAYER).unwrap();
        let diff = base.values.iter().zip(&cam.values).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5, "c={c}: {diff:e}");
    }
}

#[test]
fn bad_requests() {
    let mut m = model(0);
    let img = image(0);
    let err = grad_cam(&mut m, &img, 3, DEFAULT_LAYER).unwrap_err().to_string();
    assert!(err.contains("out of range"), "{err}");
    let err = grad_cam(&mut m, &img, 0, "bogus").unwrap_err().to_string();
    assert!(err.contains("E") && err.contains("C1") && err.contains("backbone"), "{err}");
    let err = grad_cam(&mut m, &img, 0, "F").unwrap_err().to_string();
    assert!(err.contains("rank-4"), "{err}");
}

#[test]
fn overlay_file_has_image_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cam.ppm");
    let img = image(11);
    let cam = grad_cam(&mut model(12), &img, 1, DEFAULT_LAYER).unwrap();
    render_heatmap(&cam, &img, &path).unwrap();
    let back = Image::read_ppm(&path).unwrap();
    assert_eq!((back.width, back.height), (16, 16));
    assert_eq!(back, overlay(&cam, &img));
    assert!(render_heatmap(&cam, &img, dir.path().join("missing/dir/cam.ppm")).is_err());
}

#[test]
fn flat_maps_tint_uniformly() {
    let img = image(13);
    let gray: Vec<f64> = img
        .pixels
        .chunks(3)
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
        .collect();
    for (v, tint) in [(0.0f32, [0.0, 0.0, 255.0]), (1.0, [255.0, 0.0, 0.0])] {
        let map = GradCamMap {
            values: vec![v; 16],
            height: 4,
            width: 4,
            target_class: 0,
            target_layer: DEFAULT_LAYER.into(),
            input_size: (16, 16),
        };
        let out = overlay(&map, &img);
        for (p, g) in out.pixels.chunks(3).zip(&gray) {
            for k in 0..3 {
                let want = 0.5 * g + 0.5 * tint[k];
                assert!((p[k] as f64 - want).abs() <= 0.5 + 1e-3, "{} vs {want}", p[k]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cam_is_bounded_and_normalized(
        c in 1usize..4, h in 1usize..5, w in 1usize..5,
        a in proptest::collection::vec(-3.0f32..3.0, 64),
        g in proptest::collection::vec(-3.0f32..3.0, 64),
    ) {
        let n = c * h * w;
        let at = Tensor::new(&[1, c, h, w], a[..n].to_vec()).unwrap();
        let gt = Tensor::new(&[1, c, h, w], g[..n].to_vec()).unwrap();
        let (m, _, _) = cam_from_activation(&at, &gt).unwrap();
        prop_assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = m.iter().copied().fold(0.0, f32::max);
        prop_assert!(max == 1.0 || m.iter().all(|&v| v == 0.0));
    }
}
