//! Central finite-difference gradient checks.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function of one input with central
/// differences at step `eps·max(1, |x|)`, rounded down to a power of two so
/// that `x ± h` is exact for inputs on a coarse grid. Returns the largest
/// `|analytic − numeric| / max(1, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, input: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(input), eps)
}

/// [`grad_check`] over several inputs at once; the maximum error across all
/// elements of all inputs is returned.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let analytic = analytic_grads(&f, inputs)?;

    let mut worst = 0.0f32;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x = input.data()[i];
            let h = pow2_floor(eps * x.abs().max(1.0));
            let (xp, xm) = (x + h, x - h);
            work[which].data_mut()[i] = xp;
            let fp = evaluate(&f, &work)?;
            work[which].data_mut()[i] = xm;
            let fm = evaluate(&f, &work)?;
            work[which].data_mut()[i] = x;

            let numeric = (fp - fm) / (xp as f64 - xm as f64);
            let a = analytic[which].data()[i] as f64;
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
            worst = worst.max(err as f32);
        }
    }
    Ok(worst)
}

fn pow2_floor(v: f32) -> f32 {
    2f32.powi(v.log2().floor() as i32)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.dims())))
        .collect())
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Graph(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.dims()
        )));
    }
    Ok(t.data()[0] as f64)
}
