//! Grad-CAM saliency maps and heatmap overlays.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{Image, PatchBox};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;
use crate::train::Model;

pub const DEFAULT_LAYER: &str = "E";

/// Saliency over the H×W grid of the target layer, normalized to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCamMap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    pub target_layer: String,
    pub input_size: (usize, usize),
}

impl GradCamMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Bilinear upsampling to `out_h × out_w` with pixel-centre alignment.
    pub fn upsample(&self, out_h: usize, out_w: usize) -> Vec<f32> {
        let sy = self.height as f32 / out_h as f32;
        let sx = self.width as f32 / out_w as f32;
        let mut out = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
                let bottom = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        out
    }

    /// Rank-4 tensor with N = C = 1, suitable for `write_features`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, 1, self.height, self.width], self.values.clone())
    }

    /// Mean upsampled value inside and outside `patch`.
    pub fn mass_inside_outside(&self, patch: &PatchBox) -> (f32, f32) {
        let (h, w) = self.input_size;
        let up = self.upsample(h, w);
        let (mut sin, mut nin, mut sout, mut nout) = (0.0f64, 0usize, 0.0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                let v = up[y * w + x] as f64;
                if patch.contains(x, y) {
                    sin += v;
                    nin += 1;
                } else {
                    sout += v;
                    nout += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64) as f32 };
        (mean(sin, nin), mean(sout, nout))
    }
}

/// `ReLU(Σ_c w_c·A_c)` with `w_c` the spatial mean of `∂y/∂A_c`, scaled so
/// the maximum is 1. A map that is zero everywhere stays zero.
pub fn cam_from_activation(activation: &Tensor, gradient: &Tensor) -> Result<(Vec<f32>, usize, usize)> {
    let (n, c, h, w) = activation.nchw()?;
    if n != 1 || gradient.dims() != activation.dims() {
        return Err(Error::Shape(format!(
            "Grad-CAM needs one activation map with a matching gradient, got {:?} / {:?}",
            activation.dims(),
            gradient.dims()
        )));
    }
    let hw = h * w;
    let mut raw = vec![0.0f64; hw];
    for ch in 0..c {
        let g = &gradient.data()[ch * hw..(ch + 1) * hw];
        let weight = g.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        if weight == 0.0 {
            continue;
        }
        let a = &activation.data()[ch * hw..(ch + 1) * hw];
        for (r, &v) in raw.iter_mut().zip(a) {
            *r += weight * v as f64;
        }
    }
    Ok((normalize(&raw), h, w))
}

fn normalize(raw: &[f64]) -> Vec<f32> {
    let relu: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    let max = relu.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0.0; raw.len()];
    }
    relu.iter().map(|&v| (v / max) as f32).collect()
}

/// Grad-CAM of `target_class` at the named stage for a single image.
pub fn grad_cam(model: &mut Model, image: &Image, target_class: usize, target_layer: &str) -> Result<GradCamMap> {
    let classes = model.cfg.n_classes;
    if target_class >= classes {
        return Err(Error::Config(format!(
            "class {target_class} out of range for a {classes}-class model"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.to_tensor());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (ctx, logits) = model.forward(&mut tape, x, Mode::Eval, 0.0, &mut rng)?;
    let stage = ctx.stage(target_layer).ok_or_else(|| {
        Error::Config(format!(
            "unknown stage {target_layer:?}; valid stages: {}",
            ctx.stage_names().join(", ")
        ))
    })?;
    if ctx.tape.value(stage).rank() != 4 {
        return Err(Error::Shape(format!(
            "stage {target_layer:?} is not a rank-4 activation (shape {:?})",
            ctx.tape.value(stage).dims()
        )));
    }
    let score = ctx.tape.select(logits, target_class)?;
    ctx.tape.backward(score)?;
    let activation = ctx.tape.value(stage).clone();
    let gradient = ctx
        .tape
        .grad(stage)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(activation.dims()));
    let (values, height, width) = cam_from_activation(&activation, &gradient)?;
    Ok(GradCamMap {
        values,
        height,
        width,
        target_class,
        target_layer: target_layer.to_string(),
        input_size: (image.height, image.width),
    })
}

/// Blue→red ramp blended at 0.5 over the grayscale image.
pub fn overlay(map: &GradCamMap, image: &Image) -> Image {
    let up = map.upsample(image.height, image.width);
    let gray = image.to_gray();
    let mut pixels = Vec::with_capacity(image.pixels.len());
    for (&v, &g) in up.iter().zip(&gray) {
        let v = v.clamp(0.0, 1.0);
        let color = [255.0 * v, 0.0, 255.0 * (1.0 - v)];
        for c in color {
            pixels.push((0.5 * g + 0.5 * c).round().clamp(0.0, 255.0) as u8);
        }
    }
    Image {
        width: image.width,
        height: image.height,
        pixels,
    }
}

pub fn render_heatmap(map: &GradCamMap, image: &Image, out_path: impl AsRef<Path>) -> Result<()> {
    overlay(map, image).write_ppm(out_path)
}
