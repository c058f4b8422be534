//! Dense row-major `f32` tensors.
//!
//! A [`Tensor`] is an immutable-by-convention value: the buffer is shared
//! behind an `Arc`, so clones are cheap and tensors can be read from many
//! threads. Mutation goes through [`Tensor::data_mut`], which copies on write.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor from row-major values. Ranks 0 through 4 are accepted;
    /// rank 0 is a scalar.
    pub fn new(dims: &[usize], values: Vec<f32>) -> Result<Self> {
        if dims.len() > 4 {
            return Err(Error::Shape(format!("rank {} exceeds 4", dims.len())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if values.len() != expected {
            return Err(Error::Length {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: Arc::new(values),
        })
    }

    pub(crate) fn from_parts(dims: Vec<usize>, values: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        Self {
            dims,
            data: Arc::new(values),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// Zero-mean normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f32, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let normal = Normal::new(0.0f32, std.max(0.0)).expect("finite std");
        let values = (0..n).map(|_| normal.sample(rng)).collect();
        Self::from_parts(dims.to_vec(), values)
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n = dims.iter().product();
        let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_parts(dims.to_vec(), values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// Interprets the tensor as NCHW. Lower ranks are not padded.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected rank-4 NCHW tensor, got {:?}",
                self.dims
            ))),
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.len() {
            return Err(Error::Length {
                expected: n,
                actual: self.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        let values = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.dims.clone(), values))
    }

    /// Element-wise `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        for (a, b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Channel band `[start, start + len)` of a rank-4 or rank-2 tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (n, c, inner) = channel_layout(&self.dims)?;
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!(
                "channel band {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            let base = (b * c + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims.clone();
        dims[1] = len;
        Ok(Self::from_parts(dims, out))
    }
}

/// (batch, channels, elements per channel) for rank-2 and rank-4 layouts.
pub(crate) fn channel_layout(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::Shape(format!(
            "expected rank-2 or rank-4 tensor, got {dims:?}"
        ))),
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_construction() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.dims(), &[2, 2]);
    }

    #[test]
    fn paper_feature_shape() {
        let t = Tensor::new(&[1, 1920, 7, 7], vec![0.0; 1920 * 49]).unwrap();
        assert_eq!(t.nchw().unwrap(), (1, 1920, 7, 7));
        assert_eq!(t.sum(), 0.0);
    }

    #[test]
    fn length_mismatch_names_counts() {
        let err = Tensor::new(&[3], vec![1.0, 2.0]).unwrap_err();
        assert_eq!(err.to_string(), "expected 3 values, got 2");
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::ones(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(b.data(), &[5.0, 1.0, 1.0]);
    }

    #[test]
    fn narrow_picks_band() {
        let t = Tensor::new(&[2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let band = t.narrow_channels(1, 2).unwrap();
        assert_eq!(band.data(), &[1., 2., 4., 5.]);
    }
}
