//! Dilated, grouped 2-D cross-correlation.
//!
//! Each pass unfolds the input (im2col) and runs one matrix product per group.
//! Work is split across samples (forward, input gradient) or groups (weight
//! gradient); each worker owns a disjoint slice of the result, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::autograd::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so that `out = ceil(in / stride)`.
    SameZero,
    Valid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1, undilated, ungrouped, same-padded convolution with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::SameZero,
            bias: true,
        }
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn bias(mut self, b: bool) -> Self {
        self.bias = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::Config(format!("conv extents must be positive: {self:?}")));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Config(format!(
                "channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        if self.padding == Padding::SameZero && kernel % 2 == 0 {
            return Err(Error::Unsupported(format!(
                "even kernel {kernel} with same-zero padding"
            )));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Learnable scalars: weights plus optional bias.
    pub fn param_count(&self) -> usize {
        self.weight_dims().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let axis = |len: usize| -> Result<(usize, usize)> {
            match self.padding {
                Padding::SameZero => {
                    let out = len.div_ceil(self.stride);
                    let total = ((out - 1) * self.stride + self.span()).saturating_sub(len);
                    Ok((out, total / 2))
                }
                Padding::Valid => {
                    if len < self.span() {
                        return Err(Error::Shape(format!(
                            "input extent {len} smaller than kernel span {}",
                            self.span()
                        )));
                    }
                    Ok(((len - self.span()) / self.stride + 1, 0))
                }
            }
        };
        let (out_h, pad_top) = axis(h)?;
        let (out_w, pad_left) = axis(w)?;
        Ok(Geometry {
            in_h: h,
            in_w: w,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Range of output indices whose tap at `offset` lands inside `[0, len)`,
/// where input = out·stride + offset − pad.
fn valid_range(offset: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    let hi_num = len + pad;
    if hi_num <= offset {
        return (0, 0);
    }
    let hi = ((hi_num - offset - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) struct ConvRecord {
    pub input: Var,
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: ConvSpec,
    pub geom: Geometry,
}

/// Kernel taps `(kh, kw)` that touch at least one real input pixel. Taps that
/// only ever read padding contribute nothing and are skipped, which matters for
/// large dilation rates on small maps.
fn active_taps(spec: &ConvSpec, geom: &Geometry) -> Vec<(usize, usize)> {
    let (k, s, d) = (spec.kernel, spec.stride, spec.dilation);
    let mut taps = Vec::with_capacity(k * k);
    for kh in 0..k {
        let (h0, h1) = valid_range(kh * d, geom.pad_top, s, geom.in_h, geom.out_h);
        if h0 >= h1 {
            continue;
        }
        for kw in 0..k {
            let (w0, w1) = valid_range(kw * d, geom.pad_left, s, geom.in_w, geom.out_w);
            if w0 < w1 {
                taps.push((kh, kw));
            }
        }
    }
    taps
}

/// Unfolds the `cin_g` planes of `src` into `cols`, one row of `out_h·out_w`
/// per (input channel, active tap).
fn im2col(src: &[f32], cin_g: usize, taps: &[(usize, usize)], spec: &ConvSpec, geom: &Geometry, cols: &mut [f32]) {
    let (s, d) = (spec.stride, spec.dilation);
    let in_plane = geom.in_h * geom.in_w;
    let p = geom.out_h * geom.out_w;
    cols.fill(0.0);
    for cl in 0..cin_g {
        let plane = &src[cl * in_plane..(cl + 1) * in_plane];
        for (t, &(kh, kw)) in taps.iter().enumerate() {
            let row = &mut cols[(cl * taps.len() + t) * p..(cl * taps.len() + t + 1) * p];
            let (oh0, oh1) = valid_range(kh * d, geom.pad_top, s, geom.in_h, geom.out_h);
            let (ow0, ow1) = valid_range(kw * d, geom.pad_left, s, geom.in_w, geom.out_w);
            for oh in oh0..oh1 {
                let ih = oh * s + kh * d - geom.pad_top;
                let iw0 = ow0 * s + kw * d - geom.pad_left;
                let irow = &plane[ih * geom.in_w..(ih + 1) * geom.in_w];
                let dst = &mut row[oh * geom.out_w + ow0..oh * geom.out_w + ow1];
                if s == 1 {
                    dst.copy_from_slice(&irow[iw0..iw0 + dst.len()]);
                } else {
                    for (o, &v) in dst.iter_mut().zip(irow[iw0..].iter().step_by(s)) {
                        *o = v;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into the planes of `dst`.
fn col2im(cols: &[f32], cin_g: usize, taps: &[(usize, usize)], spec: &ConvSpec, geom: &Geometry, dst: &mut [f32]) {
    let (s, d) = (spec.stride, spec.dilation);
    let in_plane = geom.in_h * geom.in_w;
    let p = geom.out_h * geom.out_w;
    for cl in 0..cin_g {
        let plane = &mut dst[cl * in_plane..(cl + 1) * in_plane];
        for (t, &(kh, kw)) in taps.iter().enumerate() {
            let row = &cols[(cl * taps.len() + t) * p..(cl * taps.len() + t + 1) * p];
            let (oh0, oh1) = valid_range(kh * d, geom.pad_top, s, geom.in_h, geom.out_h);
            let (ow0, ow1) = valid_range(kw * d, geom.pad_left, s, geom.in_w, geom.out_w);
            for oh in oh0..oh1 {
                let ih = oh * s + kh * d - geom.pad_top;
                let iw0 = ow0 * s + kw * d - geom.pad_left;
                let irow = &mut plane[ih * geom.in_w..(ih + 1) * geom.in_w];
                let src = &row[oh * geom.out_w + ow0..oh * geom.out_w + ow1];
                if s == 1 {
                    for (o, &v) in irow[iw0..iw0 + src.len()].iter_mut().zip(src) {
                        *o += v;
                    }
                } else {
                    for (o, &v) in irow[iw0..].iter_mut().step_by(s).zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Weights of group `g` restricted to the active taps, as a
/// `cout_g × (cin_g·taps)` row-major matrix.
fn gather_weights(weights: &[f32], g: usize, spec: &ConvSpec, taps: &[(usize, usize)]) -> Vec<f32> {
    let (cin_g, cout_g, k) = (spec.in_channels / spec.groups, spec.out_channels / spec.groups, spec.kernel);
    let mut out = Vec::with_capacity(cout_g * cin_g * taps.len());
    for co in g * cout_g..(g + 1) * cout_g {
        for cl in 0..cin_g {
            let base = (co * cin_g + cl) * k * k;
            out.extend(taps.iter().map(|&(kh, kw)| weights[base + kh * k + kw]));
        }
    }
    out
}

/// `c = a·b + beta·c` for row-major `a: m×k` (or `k×m` when `ta`),
/// `b: k×n` (or `n×k` when `tb`) and `c: m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides address exactly the m×k, k×n and m×n elements whose
    // presence the assertion above checks.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(
    x: &[f32],
    n: usize,
    weights: &[f32],
    bias: Option<&[f32]>,
    spec: &ConvSpec,
    geom: &Geometry,
) -> Vec<f32> {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (cin_g, cout_g) = (cin / spec.groups, cout / spec.groups);
    let in_plane = geom.in_h * geom.in_w;
    let p = geom.out_h * geom.out_w;
    let taps = active_taps(spec, geom);
    let r = cin_g * taps.len();
    let wg: Vec<Vec<f32>> = (0..spec.groups).map(|g| gather_weights(weights, g, spec, &taps)).collect();
    let mut out = vec![0.0f32; n * cout * p];

    out.par_chunks_mut(cout * p).enumerate().for_each(|(b, sample)| {
        if let Some(bias) = bias {
            for (co, plane) in sample.chunks_mut(p).enumerate() {
                plane.fill(bias[co]);
            }
        }
        if r == 0 {
            return;
        }
        let mut cols = vec![0.0f32; r * p];
        for (g, w) in wg.iter().enumerate() {
            let src = &x[(b * cin + g * cin_g) * in_plane..(b * cin + (g + 1) * cin_g) * in_plane];
            im2col(src, cin_g, &taps, spec, geom, &mut cols);
            gemm(cout_g, r, p, w, false, &cols, false, 1.0, &mut sample[g * cout_g * p..(g + 1) * cout_g * p]);
        }
    });
    out
}

pub(crate) fn backward_input(
    gout: &[f32],
    n: usize,
    weights: &[f32],
    spec: &ConvSpec,
    geom: &Geometry,
) -> Vec<f32> {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (cin_g, cout_g) = (cin / spec.groups, cout / spec.groups);
    let in_plane = geom.in_h * geom.in_w;
    let p = geom.out_h * geom.out_w;
    let taps = active_taps(spec, geom);
    let r = cin_g * taps.len();
    let wg: Vec<Vec<f32>> = (0..spec.groups).map(|g| gather_weights(weights, g, spec, &taps)).collect();
    let mut dx = vec![0.0f32; n * cin * in_plane];
    if r == 0 {
        return dx;
    }

    dx.par_chunks_mut(cin * in_plane).enumerate().for_each(|(b, sample)| {
        let mut cols = vec![0.0f32; r * p];
        for (g, w) in wg.iter().enumerate() {
            let gsrc = &gout[(b * cout + g * cout_g) * p..(b * cout + (g + 1) * cout_g) * p];
            gemm(r, cout_g, p, w, true, gsrc, false, 0.0, &mut cols);
            col2im(&cols, cin_g, &taps, spec, geom, &mut sample[g * cin_g * in_plane..(g + 1) * cin_g * in_plane]);
        }
    });
    dx
}

pub(crate) fn backward_weight(
    x: &[f32],
    gout: &[f32],
    n: usize,
    spec: &ConvSpec,
    geom: &Geometry,
) -> Vec<f32> {
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel);
    let (cin_g, cout_g) = (cin / spec.groups, cout / spec.groups);
    let in_plane = geom.in_h * geom.in_w;
    let p = geom.out_h * geom.out_w;
    let taps = active_taps(spec, geom);
    let r = cin_g * taps.len();
    let mut dw = vec![0.0f32; cout * cin_g * k * k];
    if r == 0 {
        return dw;
    }

    // One task per group; batches accumulate in a fixed order.
    dw.par_chunks_mut(cout_g * cin_g * k * k).enumerate().for_each(|(g, wslice)| {
        let mut cols = vec![0.0f32; r * p];
        let mut acc = vec![0.0f32; cout_g * r];
        for b in 0..n {
            let src = &x[(b * cin + g * cin_g) * in_plane..(b * cin + (g + 1) * cin_g) * in_plane];
            im2col(src, cin_g, &taps, spec, geom, &mut cols);
            let gsrc = &gout[(b * cout + g * cout_g) * p..(b * cout + (g + 1) * cout_g) * p];
            gemm(cout_g, p, r, gsrc, false, &cols, true, 1.0, &mut acc);
        }
        for col in 0..cout_g {
            for cl in 0..cin_g {
                for (t, &(kh, kw)) in taps.iter().enumerate() {
                    wslice[(col * cin_g + cl) * k * k + kh * k + kw] = acc[col * r + cl * taps.len() + t];
                }
            }
        }
    });
    dw
}

pub(crate) fn backward<'a>(
    rec: &ConvRecord,
    g: &Tensor,
    val: impl Fn(Var) -> &'a Tensor,
    needs: impl Fn(Var) -> bool,
) -> Vec<(Var, Tensor)> {
    let x = val(rec.input);
    let n = x.dims()[0];
    let mut out = Vec::new();
    if needs(rec.input) {
        let dx = backward_input(g.data(), n, val(rec.weight).data(), &rec.spec, &rec.geom);
        out.push((rec.input, Tensor::from_parts(x.dims().to_vec(), dx)));
    }
    if needs(rec.weight) {
        let dw = backward_weight(x.data(), g.data(), n, &rec.spec, &rec.geom);
        out.push((rec.weight, Tensor::from_parts(rec.spec.weight_dims().to_vec(), dw)));
    }
    if let Some(b) = rec.bias.filter(|&b| needs(b)) {
        let plane = rec.geom.out_h * rec.geom.out_w;
        let cout = rec.spec.out_channels;
        let mut db = vec![0.0f32; cout];
        for (idx, gp) in g.data().chunks(plane).enumerate() {
            db[idx % cout] += gp.iter().sum::<f32>();
        }
        out.push((b, Tensor::from_parts(vec![cout], db)));
    }
    out
}

impl Tape {
    pub fn conv2d(&mut self, input: Var, spec: &ConvSpec, weight: Var, bias: Option<Var>) -> Result<Var> {
        spec.validate()?;
        let (n, c, h, w) = self.value(input).nchw()?;
        if c != spec.in_channels {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {c}",
                spec.in_channels
            )));
        }
        if self.dims(weight) != spec.weight_dims() {
            return Err(Error::ShapeMismatch {
                lhs: spec.weight_dims().to_vec(),
                rhs: self.dims(weight).to_vec(),
            });
        }
        if bias.is_some() != spec.bias {
            return Err(Error::Config(format!(
                "conv bias flag {} but bias tensor {}",
                spec.bias,
                if bias.is_some() { "given" } else { "missing" }
            )));
        }
        if let Some(b) = bias {
            if self.dims(b) != [spec.out_channels] {
                return Err(Error::ShapeMismatch {
                    lhs: vec![spec.out_channels],
                    rhs: self.dims(b).to_vec(),
                });
            }
        }
        let geom = spec.geometry(h, w)?;
        let y = forward(
            self.value(input).data(),
            n,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            spec,
            &geom,
        );
        let out = Tensor::from_parts(vec![n, spec.out_channels, geom.out_h, geom.out_w], y);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            out,
            &inputs,
            Op::Conv2d(ConvRecord {
                input,
                weight,
                bias,
                spec: spec.clone(),
                geom,
            }),
        )
    }
}
