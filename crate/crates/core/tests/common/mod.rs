//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the code under test except for plain data access.
#![allow(dead_code)]

pub mod convsuite;
pub mod gradsuite;

use msafeb_core::data::Image;
use msafeb_core::layers::conv::{ConvSpec, Padding};
use msafeb_core::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts `y` with a fixed random tensor so any output becomes a scalar
/// whose gradient exercises every element.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::uniform(tape.dims(y), -1.0, 1.0, &mut rng(seed ^ 0x9e37_79b9));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Uniform values in ±[margin, 1], keeping clear of kinks at zero.
pub fn away_from_zero(dims: &[usize], margin: f32, seed: u64) -> Tensor {
    let t = Tensor::uniform(dims, margin, 1.0, &mut rng(seed));
    let signs = Tensor::uniform(dims, -1.0, 1.0, &mut rng(seed + 1));
    t.zip_map(&signs, |v, s| if s < 0.0 { -v } else { v }).unwrap()
}

/// Output extent and leading pad along one axis, derived from first
/// principles rather than from `ConvSpec::geometry`.
pub fn axis_geometry(len: usize, k: usize, stride: usize, dilation: usize, padding: Padding) -> (usize, usize) {
    let span = (k - 1) * dilation + 1;
    match padding {
        Padding::Valid => ((len - span) / stride + 1, 0),
        Padding::SameZero => {
            let out = (len + stride - 1) / stride;
            let need = (out - 1) * stride + span;
            let total = need.saturating_sub(len);
            (out, total / 2)
        }
    }
}

/// Six-deep loop cross-correlation in f64.
pub fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> (Vec<usize>, Vec<f64>) {
    let [n, cin, h, wd] = <[usize; 4]>::try_from(x.dims()).unwrap();
    let (k, s, d, g) = (spec.kernel, spec.stride, spec.dilation, spec.groups);
    let cout = spec.out_channels;
    let (cin_g, cout_g) = (cin / g, cout / g);
    let (oh, pt) = axis_geometry(h, k, s, d, spec.padding);
    let (ow, pl) = axis_geometry(wd, k, s, d, spec.padding);
    let xv = x.data();
    let wv = w.data();
    let mut out = vec![0.0f64; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let grp = co / cout_g;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[co] as f64);
                    for cl in 0..cin_g {
                        let ci = grp * cin_g + cl;
                        for kh in 0..k {
                            for kw in 0..k {
                                let iy = (y * s + kh * d) as isize - pt as isize;
                                let ix = (xo * s + kw * d) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin_g + cl) * k + kh) * k + kw;
                                acc += xv[xi] as f64 * wv[wi] as f64;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (vec![n, cout, oh, ow], out)
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Per-channel mean and biased variance over N, H, W in f64.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.dims()).unwrap();
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].iter().map(|&v| v as f64))
            .collect();
        mean[ch] = vals.iter().sum::<f64>() / m;
        var[ch] = vals.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / m;
    }
    (mean, var)
}

/// Two-sided p-value of Student's t by quadrature. With x = √ν·tan θ the
/// density becomes ∝ cos^(ν−1) θ on [0, π/2), which composite Simpson
/// integrates without any special functions.
pub fn t_two_sided_oracle(t: f64, df: f64) -> f64 {
    let f = |theta: f64| theta.cos().powf(df - 1.0);
    let simpson = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let theta_t = (t.abs() / df.sqrt()).atan();
    let total = simpson(0.0, std::f64::consts::FRAC_PI_2, 200_000);
    let inner = simpson(0.0, theta_t, 200_000);
    1.0 - inner / total
}

/// Doubled-angle mean of 3×3 Sobel gradients: a 2-vector whose direction
/// encodes the dominant edge orientation of the image.
pub fn orientation_feature(img: &Image) -> [f64; 2] {
    let (w, h) = (img.width, img.height);
    let gray: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| {
            let [r, g, b] = img.get(x, y);
            (r as f64 + g as f64 + b as f64) / 3.0
        })
        .collect();
    let at = |x: usize, y: usize| gray[y * w + x];
    let (mut c, mut s, mut e) = (0.0, 0.0, 0.0);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            c += gx * gx - gy * gy;
            s += 2.0 * gx * gy;
            e += gx * gx + gy * gy;
        }
    }
    [c / e, s / e]
}

/// High-precision Adam with coupled L2 decay.
pub struct AdamOracle {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl AdamOracle {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        self.t += 1;
        for i in 0..p.len() {
            let gi = g[i] + wd * p[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * gi;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * gi * gi;
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}
