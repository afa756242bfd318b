use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

/// Dense row-major array of rank 1 to 3 with an optional gradient slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("valid shape")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("valid shape")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Uniform in `[-scale, scale)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
        Self::new(shape, data).expect("valid shape")
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Self::new(shape, data).expect("valid shape")
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Freezing also drops any pending gradient.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Adds `g` into the gradient slot. Ignored for frozen tensors.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and values, ignoring gradients.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Moves the values out, leaving the shape; used when the values are
    /// stored elsewhere (checkpoint blobs).
    pub(crate) fn strip(&mut self) -> Vec<f64> {
        self.grad = None;
        std::mem::take(&mut self.data)
    }

    /// Inverse of [`Self::strip`].
    pub(crate) fn restore(&mut self, data: Vec<f64>) -> Result<()> {
        check_shape(&self.shape)?;
        if data.len() != self.shape.iter().product::<usize>() {
            return Err(Error::Dimension {
                op: "restore",
                lhs: self.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        self.data = data;
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(Error::Contract(format!(
            "tensor shape {shape:?} must have rank 1..={MAX_RANK} with positive extents"
        )));
    }
    Ok(())
}
