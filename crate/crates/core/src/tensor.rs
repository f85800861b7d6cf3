//! Dense tensors and named parameter collections.
//!
//! Values are stored row-major as `f64`. Training at 64-bit keeps the
//! reduction-order guarantees simple and makes finite-difference checks
//! trustworthy; file formats that call for 32-bit storage narrow on write.

use crate::error::{Error, Result};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// A dense row-major tensor. Non-finite values are rejected at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "value {} at flat index {i} of shape {shape:?}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Reserved for gradient buffers and
    /// optimizer updates; forward values are treated as immutable.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Shape(format!(
                "item() on non-scalar of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Rows `rows` of a tensor whose first axis is the batch axis.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(Error::Shape("gather_rows on scalar".into()));
        }
        let stride: usize = self.shape[1..].iter().product();
        let n = self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::Invalid(format!("row {r} out of range 0..{n}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// One named parameter: a value tensor plus a gradient buffer of equal shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order, which fixes every reduction and update order in the crate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `g` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if p.grad.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} vs parameter shape {:?} for {name}",
                g.shape(),
                p.grad.shape()
            )));
        }
        for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *dst += src;
        }
        Ok(())
    }

    /// Plain SGD: value -= lr * grad, in insertion order.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in self.entries.values_mut() {
            let grad = p.grad.data().to_vec();
            for (v, g) in p.value.data_mut().iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
    }

    /// True when both sets have identical names, shapes, and bitwise-equal values.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.entries.iter().zip(other.entries.iter()).all(
            |((an, ap), (bn, bp))| {
                an == bn
                    && ap.value.shape() == bp.value.shape()
                    && ap.value
                        .data()
                        .iter()
                        .zip(bp.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            },
        )
    }

    pub fn max_abs_value_diff(&self, other: &ParamSet) -> f64 {
        self.entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max)
    }
}
