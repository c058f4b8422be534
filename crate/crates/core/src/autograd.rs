//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends one record to the [`Tape`]; records are
//! therefore topologically ordered by construction. [`Tape::backward`] walks
//! the records once in reverse and accumulates vector-Jacobian products into
//! the inputs of each record.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::layers::{batchnorm, conv, loss, pool};
use crate::tensor::{channel_layout, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    AddScalar(Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Select(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow { input: Var, start: usize },
    Dense { input: Var, weight: Var, bias: Option<Var> },
    MulChannel { input: Var, gate: Var },
    MulSpatial { input: Var, gate: Var },
    ChannelMeanMax { input: Var, argmax: Vec<u32> },
    Conv2d(conv::ConvRecord),
    BatchNorm(batchnorm::BnRecord),
    Gap(Var),
    Dropout { input: Var, mask: Vec<f32> },
    SoftmaxCe(loss::CeRecord),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddScalar(..) => "add_scalar",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sum(..) => "sum",
            Op::Select(..) => "select",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat_channels",
            Op::Narrow { .. } => "narrow_channels",
            Op::Dense { .. } => "dense",
            Op::MulChannel { .. } => "mul_channel",
            Op::MulSpatial { .. } => "mul_spatial",
            Op::ChannelMeanMax { .. } => "channel_mean_max",
            Op::Conv2d(..) => "conv2d",
            Op::BatchNorm(..) => "batch_norm",
            Op::Gap(..) => "global_avg_pool",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCe(..) => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape in checked mode: every forward result is asserted finite.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            checked: true,
        }
    }

    pub fn with_checks(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.node(v).value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of `v`, absent until a backward pass reaches it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index]
    }

    fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|&v| self.node(v).requires_grad);
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    /// Populates gradients of `loss` with respect to every record that
    /// requires one. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.owns(loss) {
            return Err(Error::Graph("loss is not recorded on this tape".into()));
        }
        let root = &self.nodes[loss.index];
        if root.value.len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a single element, got shape {:?}",
                root.value.dims()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }

        let mut local: Vec<Option<Tensor>> = vec![None; loss.index + 1];
        local[loss.index] = Some(Tensor::from_parts(root.value.dims().to_vec(), vec![1.0]));

        for i in (0..=loss.index).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                for (input, contribution) in self.vjp(node, &g) {
                    if !self.nodes[input.index].requires_grad {
                        continue;
                    }
                    match &mut local[input.index] {
                        Some(acc) => acc.add_assign(&contribution)?,
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            if self.grads.len() <= i {
                self.grads.resize(i + 1, None);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let needs = |v: Var| self.nodes[v.index].requires_grad;
        let val = |v: Var| &self.nodes[v.index].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, zip(g, val(*b), |g, y| g * y)));
                }
                if needs(*b) {
                    out.push((*b, zip(g, val(*a), |g, x| g * x)));
                }
                out
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::Relu(a) => vec![(*a, zip(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Sigmoid(a) => {
                let y = &node.value;
                vec![(*a, zip(g, y, |g, y| g * y * (1.0 - y)))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).dims(), g.data()[0]))],
            Op::Select(a, index) => {
                let mut d = vec![0.0; val(*a).len()];
                d[*index] = g.data()[0];
                vec![(*a, Tensor::from_parts(val(*a).dims().to_vec(), d))]
            }
            Op::Reshape(a) => vec![(*a, Tensor::from_parts(val(*a).dims().to_vec(), g.data().to_vec()))],
            Op::Concat(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = val(p).dims()[1];
                    if needs(p) {
                        out.push((p, g.narrow_channels(start, c).expect("concat band")));
                    }
                    start += c;
                }
                out
            }
            Op::Narrow { input, start } => {
                let dims = val(*input).dims();
                let (n, c, inner) = channel_layout(dims).expect("narrow layout");
                let len = g.dims()[1];
                let mut d = vec![0.0; val(*input).len()];
                for b in 0..n {
                    let src = &g.data()[b * len * inner..(b + 1) * len * inner];
                    let dst = (b * c + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(src);
                }
                vec![(*input, Tensor::from_parts(dims.to_vec(), d))]
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => dense_backward(g, *input, *weight, *bias, val, needs),
            Op::MulChannel { input, gate } => {
                mul_channel_backward(g, *input, *gate, val, needs)
            }
            Op::MulSpatial { input, gate } => {
                mul_spatial_backward(g, *input, *gate, val, needs)
            }
            Op::ChannelMeanMax { input, argmax } => {
                let (n, c, h, w) = val(*input).nchw().expect("rank-4");
                let hw = h * w;
                let mut d = vec![0.0; n * c * hw];
                let gd = g.data();
                for b in 0..n {
                    for p in 0..hw {
                        let gm = gd[b * 2 * hw + p] / c as f32;
                        for ch in 0..c {
                            d[(b * c + ch) * hw + p] += gm;
                        }
                        let a = argmax[b * hw + p] as usize;
                        d[(b * c + a) * hw + p] += gd[(b * 2 + 1) * hw + p];
                    }
                }
                vec![(*input, Tensor::from_parts(vec![n, c, h, w], d))]
            }
            Op::Conv2d(rec) => conv::backward(rec, g, val, needs),
            Op::BatchNorm(rec) => batchnorm::backward(rec, g, val, needs),
            Op::Gap(a) => vec![(*a, pool::gap_backward(g, val(*a)))],
            Op::Dropout { input, mask } => vec![(
                *input,
                Tensor::from_parts(
                    g.dims().to_vec(),
                    g.data().iter().zip(mask).map(|(g, m)| g * m).collect(),
                ),
            )],
            Op::SoftmaxCe(rec) => loss::backward(rec, g),
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    a.zip_map(b, f).expect("gradient shape matches value shape")
}

// ---------------------------------------------------------------------------
// element-wise and structural ops

impl Tape {
    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::ShapeMismatch {
                lhs: da.to_vec(),
                rhs: db.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let y = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(y, &[a, b], Op::Add(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var> {
        let y = self.value(a).map(|x| x + s);
        self.push(y, &[a], Op::AddScalar(a))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let y = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(y, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let y = self.value(a).map(|x| x * s);
        self.push(y, &[a], Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|x| x.max(0.0));
        self.push(y, &[a], Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(sigmoid);
        self.push(y, &[a], Op::Sigmoid(a))
    }

    /// Sum of all elements as a single-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push(Tensor::scalar(s as f32), &[a], Op::Sum(a))
    }

    /// One element (flat row-major index) as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.len() {
            return Err(Error::Shape(format!(
                "index {index} out of range for {} elements",
                v.len()
            )));
        }
        let y = Tensor::scalar(v.data()[index]);
        self.push(y, &[a], Op::Select(a, index))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(dims)?;
        self.push(y, &[a], Op::Reshape(a))
    }

    /// Concatenates along the channel axis (axis 1). Parts must agree on every
    /// other extent.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of an empty list".into()))?;
        let dims0 = self.dims(first).to_vec();
        let (n, _, inner) = channel_layout(&dims0)?;
        let mut total_c = 0;
        for (k, &p) in parts.iter().enumerate() {
            let d = self.dims(p);
            let compatible = d.len() == dims0.len()
                && d[0] == dims0[0]
                && d[2..] == dims0[2..];
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat part {k} has shape {d:?}, incompatible with part 0 shape {dims0:?}"
                )));
            }
            total_c += d[1];
        }
        let mut out = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let band = v.dims()[1] * inner;
                out.extend_from_slice(&v.data()[b * band..(b + 1) * band]);
            }
        }
        let mut dims = dims0;
        dims[1] = total_c;
        self.push(Tensor::from_parts(dims, out), parts, Op::Concat(parts.to_vec()))
    }

    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(a).narrow_channels(start, len)?;
        self.push(y, &[a], Op::Narrow { input: a, start })
    }

    /// `input (N×F_in) · weight (F_in×F_out) + bias (F_out)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let (n, fin) = match *x.dims() {
            [n, f] => (n, f),
            _ => return Err(Error::Shape(format!("dense input must be rank 2, got {:?}", x.dims()))),
        };
        let fout = match *w.dims() {
            [i, o] if i == fin => o,
            _ => {
                return Err(Error::ShapeMismatch {
                    lhs: x.dims().to_vec(),
                    rhs: w.dims().to_vec(),
                })
            }
        };
        let mut out = vec![0.0f32; n * fout];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.dims() != [fout] {
                return Err(Error::ShapeMismatch {
                    lhs: vec![fout],
                    rhs: bv.dims().to_vec(),
                });
            }
        }
        let (xd, wd) = (x.data(), w.data());
        for r in 0..n {
            let row = &mut out[r * fout..(r + 1) * fout];
            for i in 0..fin {
                let xv = xd[r * fin + i];
                for (o, &wv) in row.iter_mut().zip(&wd[i * fout..(i + 1) * fout]) {
                    *o += xv * wv;
                }
            }
            if let Some(b) = bias {
                for (o, &bv) in row.iter_mut().zip(self.value(b).data()) {
                    *o += bv;
                }
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            Tensor::from_parts(vec![n, fout], out),
            &inputs,
            Op::Dense {
                input,
                weight,
                bias,
            },
        )
    }

    /// `input (N×C×H×W)` scaled per channel by `gate (N×C)`.
    pub fn mul_channel(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        if self.dims(gate) != [n, c] {
            return Err(Error::ShapeMismatch {
                lhs: vec![n, c],
                rhs: self.dims(gate).to_vec(),
            });
        }
        let hw = h * w;
        let gd = self.value(gate).data();
        let mut y = self.value(input).data().to_vec();
        for (k, plane) in y.chunks_mut(hw).enumerate() {
            let s = gd[k];
            plane.iter_mut().for_each(|x| *x *= s);
        }
        self.push(
            Tensor::from_parts(vec![n, c, h, w], y),
            &[input, gate],
            Op::MulChannel { input, gate },
        )
    }

    /// `input (N×C×H×W)` scaled per position by `gate (N×1×H×W)`.
    pub fn mul_spatial(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        if self.dims(gate) != [n, 1, h, w] {
            return Err(Error::ShapeMismatch {
                lhs: vec![n, 1, h, w],
                rhs: self.dims(gate).to_vec(),
            });
        }
        let hw = h * w;
        let gd = self.value(gate).data();
        let mut y = self.value(input).data().to_vec();
        for (k, plane) in y.chunks_mut(hw).enumerate() {
            let g = &gd[(k / c) * hw..(k / c + 1) * hw];
            plane.iter_mut().zip(g).for_each(|(x, s)| *x *= s);
        }
        self.push(
            Tensor::from_parts(vec![n, c, h, w], y),
            &[input, gate],
            Op::MulSpatial { input, gate },
        )
    }

    /// Per-position channel mean and channel max stacked as two maps
    /// (N×2×H×W). Max ties resolve to the lowest channel.
    pub fn channel_mean_max(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        let hw = h * w;
        let xd = self.value(input).data();
        let mut out = vec![0.0f32; n * 2 * hw];
        let mut argmax = vec![0u32; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut sum = 0.0f64;
                let mut best = f32::NEG_INFINITY;
                let mut arg = 0;
                for ch in 0..c {
                    let v = xd[(b * c + ch) * hw + p];
                    sum += v as f64;
                    if v > best {
                        best = v;
                        arg = ch;
                    }
                }
                out[b * 2 * hw + p] = (sum / c as f64) as f32;
                out[(b * 2 + 1) * hw + p] = best;
                argmax[b * hw + p] = arg as u32;
            }
        }
        self.push(
            Tensor::from_parts(vec![n, 2, h, w], out),
            &[input],
            Op::ChannelMeanMax { input, argmax },
        )
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dense_backward<'a>(
    g: &Tensor,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    val: impl Fn(Var) -> &'a Tensor,
    needs: impl Fn(Var) -> bool,
) -> Vec<(Var, Tensor)> {
    let (x, w) = (val(input), val(weight));
    let (n, fin) = (x.dims()[0], x.dims()[1]);
    let fout = w.dims()[1];
    let (gd, xd, wd) = (g.data(), x.data(), w.data());
    let mut out = Vec::new();
    if needs(input) {
        let mut dx = vec![0.0f32; n * fin];
        for r in 0..n {
            let grow = &gd[r * fout..(r + 1) * fout];
            for i in 0..fin {
                dx[r * fin + i] = grow
                    .iter()
                    .zip(&wd[i * fout..(i + 1) * fout])
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        out.push((input, Tensor::from_parts(vec![n, fin], dx)));
    }
    if needs(weight) {
        let mut dw = vec![0.0f32; fin * fout];
        for r in 0..n {
            let grow = &gd[r * fout..(r + 1) * fout];
            for i in 0..fin {
                let xv = xd[r * fin + i];
                for (d, &gv) in dw[i * fout..(i + 1) * fout].iter_mut().zip(grow) {
                    *d += xv * gv;
                }
            }
        }
        out.push((weight, Tensor::from_parts(vec![fin, fout], dw)));
    }
    if let Some(b) = bias.filter(|&b| needs(b)) {
        let mut db = vec![0.0f32; fout];
        for r in 0..n {
            for (d, &gv) in db.iter_mut().zip(&gd[r * fout..(r + 1) * fout]) {
                *d += gv;
            }
        }
        out.push((b, Tensor::from_parts(vec![fout], db)));
    }
    out
}

fn mul_channel_backward<'a>(
    g: &Tensor,
    input: Var,
    gate: Var,
    val: impl Fn(Var) -> &'a Tensor,
    needs: impl Fn(Var) -> bool,
) -> Vec<(Var, Tensor)> {
    let x = val(input);
    let gv = val(gate);
    let hw = x.dims()[2] * x.dims()[3];
    let mut out = Vec::new();
    if needs(input) {
        let mut dx = g.data().to_vec();
        for (k, plane) in dx.chunks_mut(hw).enumerate() {
            let s = gv.data()[k];
            plane.iter_mut().for_each(|v| *v *= s);
        }
        out.push((input, Tensor::from_parts(x.dims().to_vec(), dx)));
    }
    if needs(gate) {
        let dg = g
            .data()
            .chunks(hw)
            .zip(x.data().chunks(hw))
            .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
            .collect();
        out.push((gate, Tensor::from_parts(gv.dims().to_vec(), dg)));
    }
    out
}

fn mul_spatial_backward<'a>(
    g: &Tensor,
    input: Var,
    gate: Var,
    val: impl Fn(Var) -> &'a Tensor,
    needs: impl Fn(Var) -> bool,
) -> Vec<(Var, Tensor)> {
    let x = val(input);
    let s = val(gate);
    let (_, c, h, w) = x.nchw().expect("rank-4");
    let hw = h * w;
    let mut out = Vec::new();
    if needs(input) {
        let mut dx = g.data().to_vec();
        for (k, plane) in dx.chunks_mut(hw).enumerate() {
            let sp = &s.data()[(k / c) * hw..(k / c + 1) * hw];
            plane.iter_mut().zip(sp).for_each(|(v, s)| *v *= s);
        }
        out.push((input, Tensor::from_parts(x.dims().to_vec(), dx)));
    }
    if needs(gate) {
        let mut ds = vec![0.0f32; s.len()];
        for (k, (gp, xp)) in g.data().chunks(hw).zip(x.data().chunks(hw)).enumerate() {
            let dst = &mut ds[(k / c) * hw..(k / c + 1) * hw];
            for ((d, a), b) in dst.iter_mut().zip(gp).zip(xp) {
                *d += a * b;
            }
        }
        out.push((gate, Tensor::from_parts(s.dims().to_vec(), ds)));
    }
    out
}
