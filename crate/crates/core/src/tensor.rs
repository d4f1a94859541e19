//! Flat, shape-checked float tensors and pure elementwise arithmetic.
//!
//! Tensors carry parameters, gradients, activations, and communication
//! payloads. All arithmetic is 64-bit and pure: operations return new
//! tensors and never modify their inputs, so values can be shared freely
//! across parallel contexts.

use crate::error::{Error, Result};

/// Contiguous array of `f64` plus a shape whose product equals the data
/// length at all times.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::BadTensorLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// 1-D tensor over the given values.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the elements; the shape (and hence length) is fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index of the first non-finite element, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    /// Elementwise division. A zero anywhere in the denominator is an error,
    /// never a silent infinity.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        if let Some(index) = other.data.iter().position(|&b| b == 0.0) {
            return Err(Error::DivisionByZero { index });
        }
        self.zip_with(other, |a, b| a / b)
    }

    pub fn square(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a * a).collect(),
        }
    }

    /// Elementwise square root; negative inputs are rejected rather than
    /// producing NaN.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(index) = self.data.iter().position(|&a| a < 0.0) {
            return Err(Error::NegativeSqrt {
                value: self.data[index],
                index,
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a.sqrt()).collect(),
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a * factor).collect(),
        }
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a + value).collect(),
        }
    }
}

/// Elementwise operation selector, mirror of the individual methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Square,
    Sqrt,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

/// Dispatch an elementwise op by name. Binary ops require `b`; unary ops
/// require its absence.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op, b) {
        (ElementwiseOp::Add, Some(b)) => a.add(b),
        (ElementwiseOp::Sub, Some(b)) => a.sub(b),
        (ElementwiseOp::Mul, Some(b)) => a.mul(b),
        (ElementwiseOp::Div, Some(b)) => a.div(b),
        (ElementwiseOp::Square, None) => Ok(a.square()),
        (ElementwiseOp::Sqrt, None) => a.sqrt(),
        (op, b) => Err(Error::Config(format!(
            "elementwise {op:?} called with {} operand(s)",
            1 + b.is_some() as usize
        ))),
    }
}
