//! Dense row-major arrays and the reverse-mode graph that differentiates them.
//!
//! [`Tensor`] is a plain value: a shape and a flat `f64` buffer. Differentiation
//! happens on a [`Graph`], which records every operation applied to its
//! [`Var`] handles and replays them backwards in [`Graph::backward`].

mod gradcheck;
mod graph;
pub mod io;
pub(crate) mod kernels;

pub use gradcheck::gradient_check;
pub use graph::{Graph, Var};
pub use kernels::ConvGeometry;

use crate::error::{bail_shape, Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            bail_shape!("zero-sized dimension in {shape:?}");
        }
        if numel(shape) != data.len() {
            bail_shape!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels whose output size is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            bail_shape!("item() on tensor of shape {:?}", self.shape);
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            bail_shape!("compare {:?} with {:?}", self.shape, other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Plain (non-recorded) matrix product, used by oracles and inference helpers.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        kernels::matmul_forward(self, other)
    }

    pub fn argmax_axis1(&self) -> Result<Vec<usize>> {
        // [B, K, H, W] -> B*H*W labels
        if self.rank() != 4 {
            return Err(Error::shape(format!(
                "argmax over classes needs [B,K,H,W], got {:?}",
                self.shape
            )));
        }
        let (b, k, hw) = (self.shape[0], self.shape[1], self.shape[2] * self.shape[3]);
        let mut out = Vec::with_capacity(b * hw);
        for bi in 0..b {
            let base = bi * k * hw;
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..k {
                    let v = self.data[base + c * hw + p];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        let t = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn reshape_round_trip() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.5);
        let back = t.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert_eq!(t, back);
        assert!(t.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn argmax_picks_largest_class() {
        // B=1, K=2, 1x2 map
        let t = Tensor::new(&[1, 2, 1, 2], vec![0.0, 3.0, 1.0, 2.0]).unwrap();
        assert_eq!(t.argmax_axis1().unwrap(), vec![1, 0]);
    }
}
