//! Dense tensors and reverse-mode differentiation.
//!
//! [`Tensor`] is a plain shape + row-major buffer used for parameters and I/O.
//! Differentiable computation happens on a [`tape::Tape`]: ops append nodes,
//! [`tape::Tape::backward`] replays them in reverse. [`ops`] holds the
//! value-level kernels (softmax, logsumexp, layer norm, ...) shared by the
//! tape and by direct callers.

pub mod grad_check;
pub mod logspace;
pub mod ops;
pub mod tape;

use crate::real::Real;
use crate::{Error, Result};

/// Train/eval switch threaded through dropout and the model forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense row-major tensor.
///
/// `grad`, when present, has the same element count as `data`; it accumulates
/// gradients for leaf/parameter tensors across backward passes until
/// [`Tensor::zero_grad`] is called.
#[derive(Debug, Clone)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![F::ZERO; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Marks the tensor as a gradient leaf; builder-style.
    pub fn leaf(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Element access by multi-index; for tests and small utilities.
    pub fn at(&self, idx: &[usize]) -> F {
        assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {} out of range at axis {}", ix, i);
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Adds `g` into the gradient accumulation buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient length {} does not match tensor length {}",
                g.len(),
                self.data.len()
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![F::ZERO; self.data.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = F::ZERO);
        }
    }

    /// Converts element type (used when loading checkpoints across precisions).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut t = Tensor::<f64>::zeros(vec![2, 2]).leaf();
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad.as_deref().unwrap(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
        t.zero_grad();
        assert_eq!(t.grad.as_deref().unwrap(), &[0.0; 4]);
    }
}
