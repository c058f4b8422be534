//! Layer kernels and the parameter plumbing that binds them to a tape.

pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod loss;
pub mod pool;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use conv::{ConvSpec, Geometry, Padding};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Model state that is saved but not trained (running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named model tensors. Registration order is the
/// manifest order used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            kind,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Ids of all entries in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars, counted by enumerating the tensors.
    pub fn learnable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn learnable_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Marks every entry whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = frozen;
        }
    }
}

/// State threaded through one forward pass: the tape, the parameters bound to
/// it, and named intermediate activations ("stages").
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    bound: Vec<Option<Var>>,
    stages: Vec<(String, Var)>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, mode: Mode) -> Self {
        let bound = vec![None; store.len()];
        Self {
            tape,
            store,
            mode,
            bound,
            stages: Vec::new(),
        }
    }

    /// Binds a parameter as a tape leaf on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let requires_grad = e.kind == ParamKind::Learnable && !e.frozen;
        let v = self.tape.leaf(e.value.clone(), requires_grad);
        self.bound[id.0] = Some(v);
        v
    }

    /// Binds a parameter to an existing tape variable instead of a fresh
    /// leaf. Used to differentiate with respect to externally owned inputs.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn record_stage(&mut self, name: impl Into<String>, v: Var) {
        self.stages.push((name.into(), v));
    }

    pub fn stage(&self, name: &str) -> Option<Var> {
        self.stages.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn stage_names(&self) -> Vec<String> {
        self.stages.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Gradient for each parameter after backward, in store order. Entries
    /// that were not reached (or are frozen/buffers) are `None`.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).cloned()))
            .collect()
    }
}

/// He-normal initialization: zero mean, std `sqrt(2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(dims, (2.0 / fan_in as f32).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let wd = spec.weight_dims();
        let fan_in = wd[1] * wd[2] * wd[3];
        let weight = store.add(format!("{name}.weight"), he_normal(&wd, fan_in, rng), ParamKind::Learnable);
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), ParamKind::Learnable));
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, &self.spec, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(&[fin, fout], fin, rng), ParamKind::Learnable);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]), ParamKind::Learnable);
        Self {
            in_features: fin,
            out_features: fout,
            weight,
            bias,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.dense(x, w, Some(b))
    }
}

/// Batch normalization layer: learnable gamma/beta plus running statistics.
/// Running estimates follow `running = (1 - momentum)·batch + momentum·running`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub momentum: f32,
    pub eps: f32,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, momentum: f32, eps: f32) -> Result<Self> {
        if eps <= 0.0 || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("batch norm momentum {momentum} / eps {eps}")));
        }
        Ok(Self {
            channels,
            momentum,
            eps,
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Learnable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Learnable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer),
        })
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let c = ctx.tape.value(x).nchw()?.1;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {c}",
                self.channels
            )));
        }
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                for (r, b) in ctx.store.get_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - m) * b + m * *r;
                }
                for (r, b) in ctx.store.get_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - m) * b + m * *r;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.get(self.running_mean).clone();
                let var = ctx.store.get(self.running_var).clone();
                ctx.tape.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), self.eps)
            }
        }
    }
}
