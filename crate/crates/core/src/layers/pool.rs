use crate::autograd::{Op, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Per-channel spatial mean. Values are summed in sorted order in `f64`, so
/// the result does not depend on the spatial arrangement of the plane.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    let hw = h * w;
    let mut scratch = vec![0.0f32; hw];
    let out = x
        .data()
        .chunks(hw)
        .map(|plane| {
            scratch.copy_from_slice(plane);
            scratch.sort_unstable_by(f32::total_cmp);
            (scratch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32
        })
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub(crate) fn gap_backward(g: &Tensor, x: &Tensor) -> Tensor {
    let hw = x.dims()[2] * x.dims()[3];
    let inv = 1.0 / hw as f32;
    let mut d = Vec::with_capacity(x.len());
    for &gv in g.data() {
        d.extend(std::iter::repeat(gv * inv).take(hw));
    }
    Tensor::from_parts(x.dims().to_vec(), d)
}

impl Tape {
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let y = global_avg_pool(self.value(input))?;
        self.push(y, &[input], Op::Gap(input))
    }
}
