//! Named collections of dense-layer parameters with gradient and momentum buffers.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// One dense layer: weight `(fan_in, fan_out)` and bias `(1, fan_out)`, each
/// with a shape-identical gradient and velocity buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weight: Matrix,
    pub bias: Matrix,
    pub grad_weight: Matrix,
    pub grad_bias: Matrix,
    pub velocity_weight: Matrix,
    pub velocity_bias: Matrix,
}

impl DenseParams {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
            grad_weight: Matrix::zeros(fan_in, fan_out),
            grad_bias: Matrix::zeros(1, fan_out),
            velocity_weight: Matrix::zeros(fan_in, fan_out),
            velocity_bias: Matrix::zeros(1, fan_out),
        }
    }

    /// Glorot-uniform weights in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(fan_in, fan_out);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
        for w in p.weight.values_mut() {
            *w = dist.sample(rng);
        }
        p
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub(crate) fn tensor(&self, part: ParamPart) -> &Matrix {
        match part {
            ParamPart::Weight => &self.weight,
            ParamPart::Bias => &self.bias,
        }
    }

    pub(crate) fn tensor_mut(&mut self, part: ParamPart) -> &mut Matrix {
        match part {
            ParamPart::Weight => &mut self.weight,
            ParamPart::Bias => &mut self.bias,
        }
    }

    pub(crate) fn grad(&self, part: ParamPart) -> &Matrix {
        match part {
            ParamPart::Weight => &self.grad_weight,
            ParamPart::Bias => &self.grad_bias,
        }
    }

    pub(crate) fn grad_mut(&mut self, part: ParamPart) -> &mut Matrix {
        match part {
            ParamPart::Weight => &mut self.grad_weight,
            ParamPart::Bias => &mut self.grad_bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamPart {
    Weight,
    Bias,
}

/// An ordered, uniquely named set of dense layers belonging to one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    name: String,
    entries: Vec<(String, DenseParams)>,
}

impl ParamSet {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn push(&mut self, name: impl Into<String>, params: DenseParams) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Usage(format!(
                "duplicate parameter name `{name}` in set `{}`",
                self.name
            )));
        }
        self.entries.push((name, params));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> &DenseParams {
        &self.entries[index].1
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut DenseParams {
        &mut self.entries[index].1
    }

    pub fn entry_name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseParams)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseParams)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, p)| p.zero_grad());
    }

    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, p)| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, p)| p.weight.max_abs().max(p.bias.max_abs()))
            .fold(0.0, f64::max)
    }

    pub fn grads_all_zero(&self) -> bool {
        self.entries.iter().all(|(_, p)| {
            p.grad_weight.values().iter().all(|&g| g == 0.0)
                && p.grad_bias.values().iter().all(|&g| g == 0.0)
        })
    }

    /// True when every weight and bias (not the buffers) is bitwise equal.
    pub fn same_values(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((_, a), (_, b))| {
                bits_equal(&a.weight, &b.weight) && bits_equal(&a.bias, &b.bias)
            })
    }
}

fn bits_equal(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a
            .values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}
