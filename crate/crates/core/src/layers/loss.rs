use crate::autograd::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct CeRecord {
    logits: Var,
    probs: Vec<f32>,
    labels: Vec<usize>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = match *logits.dims() {
        [n, k] => (n, k),
        _ => return Err(Error::Shape(format!("softmax expects N×K logits, got {:?}", logits.dims()))),
    };
    let mut out = Vec::with_capacity(n * k);
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&z| ((z - m) as f64).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / total) as f32));
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}

impl Tape {
    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = match *z.dims() {
            [n, k] => (n, k),
            _ => return Err(Error::Shape(format!("cross entropy expects N×K logits, got {:?}", z.dims()))),
        };
        if labels.len() != n {
            return Err(Error::Length {
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let mut total = 0.0f64;
        let mut probs = Vec::with_capacity(n * k);
        for (row, &label) in z.data().chunks(k).zip(labels) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
            total += lse - row[label] as f64;
            probs.extend(row.iter().map(|&v| (v as f64 - lse).exp() as f32));
        }
        let loss = Tensor::scalar((total / n as f64) as f32);
        self.push(
            loss,
            &[logits],
            Op::SoftmaxCe(CeRecord {
                logits,
                probs,
                labels: labels.to_vec(),
            }),
        )
    }
}

pub(crate) fn backward(rec: &CeRecord, g: &Tensor) -> Vec<(Var, Tensor)> {
    let n = rec.labels.len();
    let k = rec.probs.len() / n;
    let scale = g.data()[0] / n as f32;
    let mut d = rec.probs.clone();
    for (row, &label) in d.chunks_mut(k).zip(&rec.labels) {
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    vec![(rec.logits, Tensor::from_parts(vec![n, k], d))]
}
