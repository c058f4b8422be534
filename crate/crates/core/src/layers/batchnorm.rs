//! Per-channel batch normalization over N×H×W.

use crate::autograd::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct BnRecord {
    input: Var,
    gamma: Var,
    beta: Var,
    /// Normalized input, kept for the backward pass.
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    /// Train mode back-propagates through the batch statistics.
    batch_stats: bool,
}

/// Per-channel biased batch statistics computed in `f64`.
pub fn batch_statistics(x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let (n, c, h, w) = x.nchw()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let plane = |b: usize| &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
        let mu = (0..n).flat_map(plane).map(|&v| v as f64).sum::<f64>() / m;
        let sq = (0..n)
            .flat_map(plane)
            .map(|&v| (v as f64 - mu).powi(2))
            .sum::<f64>()
            / m;
        mean[ch] = mu as f32;
        var[ch] = sq as f32;
    }
    Ok((mean, var))
}

impl Tape {
    /// Normalizes with the statistics of this batch. Returns the output along
    /// with the batch mean and biased variance so the caller can update its
    /// running estimates.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let (n, c, h, w) = self.value(input).nchw()?;
        if n * h * w < 2 {
            return Err(Error::Shape(format!(
                "batch norm in train mode needs at least 2 values per channel, got {}",
                n * h * w
            )));
        }
        self.check_affine(c, gamma, beta)?;
        let (mean, var) = batch_statistics(self.value(input))?;
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = self.normalize(input, gamma, beta, &mean, &inv_std, true)?;
        Ok((y, mean, var))
    }

    /// Normalizes with externally supplied (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let (_, c, _, _) = self.value(input).nchw()?;
        self.check_affine(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!(
                "running statistics have {} / {} entries for {c} channels",
                mean.len(),
                var.len()
            )));
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(input, gamma, beta, mean, &inv_std, false)
    }

    fn check_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        for v in [gamma, beta] {
            if self.dims(v) != [c] {
                return Err(Error::Shape(format!(
                    "batch norm over {c} channels got affine parameter of shape {:?}",
                    self.dims(v)
                )));
            }
        }
        Ok(())
    }

    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        inv_std: &[f32],
        batch_stats: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (_, c, h, w) = x.nchw()?;
        let hw = h * w;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = x.data().to_vec();
        let mut y = vec![0.0f32; xhat.len()];
        for (k, (xp, yp)) in xhat.chunks_mut(hw).zip(y.chunks_mut(hw)).enumerate() {
            let ch = k % c;
            for (xv, yv) in xp.iter_mut().zip(yp.iter_mut()) {
                *xv = (*xv - mean[ch]) * inv_std[ch];
                *yv = gd[ch] * *xv + bd[ch];
            }
        }
        let dims = x.dims().to_vec();
        self.push(
            Tensor::from_parts(dims, y),
            &[input, gamma, beta],
            Op::BatchNorm(BnRecord {
                input,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            }),
        )
    }
}

pub(crate) fn backward<'a>(
    rec: &BnRecord,
    g: &Tensor,
    val: impl Fn(Var) -> &'a Tensor,
    needs: impl Fn(Var) -> bool,
) -> Vec<(Var, Tensor)> {
    let x = val(rec.input);
    let (n, c, h, w) = x.nchw().expect("rank-4");
    let hw = h * w;
    let m = (n * hw) as f32;
    let gd = g.data();
    let gamma = val(rec.gamma).data();

    // Per-channel Σg and Σg·x̂, accumulated in sample order.
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (k, (gp, xp)) in gd.chunks(hw).zip(rec.xhat.chunks(hw)).enumerate() {
        let ch = k % c;
        for (&gv, &xv) in gp.iter().zip(xp) {
            sum_g[ch] += gv as f64;
            sum_gx[ch] += (gv * xv) as f64;
        }
    }

    let mut out = Vec::new();
    if needs(rec.input) {
        let mut dx = vec![0.0f32; gd.len()];
        for (k, ((dp, gp), xp)) in dx
            .chunks_mut(hw)
            .zip(gd.chunks(hw))
            .zip(rec.xhat.chunks(hw))
            .enumerate()
        {
            let ch = k % c;
            let scale = gamma[ch] * rec.inv_std[ch];
            if rec.batch_stats {
                let mg = sum_g[ch] as f32 / m;
                let mgx = sum_gx[ch] as f32 / m;
                for ((d, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
                    *d = scale * (gv - mg - xv * mgx);
                }
            } else {
                for (d, &gv) in dp.iter_mut().zip(gp) {
                    *d = scale * gv;
                }
            }
        }
        out.push((rec.input, Tensor::from_parts(x.dims().to_vec(), dx)));
    }
    if needs(rec.gamma) {
        let d = sum_gx.iter().map(|&v| v as f32).collect();
        out.push((rec.gamma, Tensor::from_parts(vec![c], d)));
    }
    if needs(rec.beta) {
        let d = sum_g.iter().map(|&v| v as f32).collect();
        out.push((rec.beta, Tensor::from_parts(vec![c], d)));
    }
    out
}
