//! Adam with coupled L2 weight decay.

use crate::error::{Error, Result};
use crate::layers::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|d| Tensor::zeros(d)).collect(),
            v: shapes.iter().map(|d| Tensor::zeros(d)).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Moment buffers for every entry of `store` (buffers included, so that
    /// indices line up with the store).
    pub fn for_store(store: &ParamStore) -> Self {
        let shapes: Vec<&[usize]> = store.entries().iter().map(|e| e.value.dims()).collect();
        Self::new(&shapes)
    }

    /// Applies one step to every learnable, unfrozen entry of the store.
    /// Entries without a gradient are treated as having a zero gradient.
    pub fn step_store(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f32, weight_decay: f32) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, store has {}, {} gradients given",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.t += 1;
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.kind != ParamKind::Learnable || entry.frozen {
                continue;
            }
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(entry.value.dims());
                    &zero
                }
            };
            update(
                &mut entry.value,
                g,
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                (self.beta1, self.beta2, self.eps),
                lr,
                weight_decay,
            )?;
        }
        Ok(())
    }
}

/// One Adam step over parallel lists of parameters and gradients.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f32, weight_decay: f32) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let hyper = (state.beta1, state.beta2, state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        update(p, g, &mut state.m[i], &mut state.v[i], state.t, hyper, lr, weight_decay)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    (beta1, beta2, eps): (f32, f32, f32),
    lr: f32,
    weight_decay: f32,
) -> Result<()> {
    for other in [grad.dims(), m.dims(), v.dims()] {
        if other != param.dims() {
            return Err(Error::ShapeMismatch {
                lhs: param.dims().to_vec(),
                rhs: other.to_vec(),
            });
        }
    }
    let bc1 = 1.0 - (beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (beta2 as f64).powi(t as i32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    let p = param.data_mut();
    let (md, vd) = (m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        let g = grad.data()[i] + weight_decay * p[i];
        md[i] = beta1 * md[i] + (1.0 - beta1) * g;
        vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        if lr != 0.0 {
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
