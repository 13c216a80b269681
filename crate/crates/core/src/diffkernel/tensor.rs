use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;
use crate::error::{Error, Result};

/// Dense row-major array with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    requires_grad: bool,
    grad: Option<Vec<R>>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<R>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: R) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: R) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| R::lit(v)).collect())
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = R::lit(rng.gen_range(-bound..=bound));
        }
        t
    }

    pub fn normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = R::lit(dist.sample(rng));
        }
        t
    }

    /// Marks the tensor as a gradient-tracked leaf.
    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    pub fn take_grad(&mut self) -> Option<Vec<R>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[R]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of {} values for tensor {:?}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<R> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape("item", format!("shape {:?} is not scalar", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts to another precision.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| S::lit(v.as_f64())).collect()),
        }
    }
}
