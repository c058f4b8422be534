//! Synthetic oriented-grating scenes.
//!
//! Class `k` of `n` shows a sinusoidal grating at orientation `k·180°/n`
//! inside a random rectangle covering 25–50 % of the image; the rest is
//! isotropic speckle. The rectangle is kept as side information.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Image, PatchBox, Source};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub wavelength: f32,
    pub grating_amplitude: f32,
    pub patch_noise: f32,
    pub min_area: f32,
    pub max_area: f32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            wavelength: 8.0,
            grating_amplitude: 90.0,
            patch_noise: 25.0,
            min_area: 0.25,
            max_area: 0.5,
        }
    }
}

pub fn synth_dataset(n_classes: usize, per_class: usize, size: (usize, usize), seed: u64) -> Result<Dataset> {
    synth_dataset_with(n_classes, per_class, size, seed, SynthOptions::default())
}

pub fn synth_dataset_with(
    n_classes: usize,
    per_class: usize,
    size: (usize, usize),
    seed: u64,
    opts: SynthOptions,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::Config("need ≥ 2 classes".into()));
    }
    let (h, w) = size;
    if h < 4 || w < 4 {
        return Err(Error::Config(format!("image size {h}x{w} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    let mut patches = Vec::with_capacity(n_classes * per_class);
    for k in 0..n_classes {
        let theta = k as f32 * PI / n_classes as f32;
        for _ in 0..per_class {
            let (img, patch) = render(&mut rng, h, w, theta, &opts);
            images.push(img);
            labels.push(k);
            patches.push(patch);
        }
    }
    Ok(Dataset {
        images,
        labels,
        class_names: (0..n_classes).map(|k| format!("class{k:02}")).collect(),
        source: Source::Synthetic,
        patches: Some(patches),
    })
}

fn render(rng: &mut ChaCha8Rng, h: usize, w: usize, theta: f32, opts: &SynthOptions) -> (Image, PatchBox) {
    let area = rng.gen_range(opts.min_area..=opts.max_area) * (h * w) as f32;
    let aspect: f32 = rng.gen_range(0.75..=1.333);
    let pw = ((area * aspect).sqrt().round() as usize).clamp(2, w);
    let ph = ((area / pw as f32).round() as usize).clamp(2, h);
    let x0 = rng.gen_range(0..=w - pw);
    let y0 = rng.gen_range(0..=h - ph);
    let patch = PatchBox {
        x0,
        y0,
        x1: x0 + pw,
        y1: y0 + ph,
    };
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let k = 2.0 * PI / opts.wavelength;

    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let v = if patch.contains(x, y) {
                let wave = (k * (x as f32 * c + y as f32 * s) + phase).sin();
                128.0 + opts.grating_amplitude * wave + rng.gen_range(-opts.patch_noise..=opts.patch_noise)
            } else {
                rng.gen_range(40.0f32..=216.0)
            };
            let v = v.round().clamp(0.0, 255.0) as u8;
            pixels.extend_from_slice(&[v, v, v]);
        }
    }
    (
        Image {
            width: w,
            height: h,
            pixels,
        },
        patch,
    )
}
