//! Named tensor container and the affine layer shared by the encoder and head.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Tensors keyed by name, iterated in sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors(pub BTreeMap<String, Tensor>);

impl NamedTensors {
    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.0.insert(name.to_string(), Tensor { shape, data });
    }

    pub fn insert_1d(&mut self, name: &str, a: &Array1<f64>) {
        self.insert(name, vec![a.len()], a.to_vec());
    }

    pub fn insert_2d(&mut self, name: &str, a: &Array2<f64>) {
        self.insert(name, vec![a.nrows(), a.ncols()], a.iter().copied().collect());
    }

    fn get(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .0
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn get_1d(&self, name: &str, len: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.get(name, &[len])?.data.clone()))
    }

    pub fn get_2d(&self, name: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
        let t = self.get(name, &[shape.0, shape.1])?;
        Array2::from_shape_vec(shape, t.data.clone()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(|t| t.data.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Affine map `y = x W^T + b` applied to each row of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    /// Weights ~ N(0, 1/fan_in), zero bias.
    pub fn init<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            weight: scaled_normal((out, inp), inp, rng),
            bias: Array1::zeros(out),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

pub fn scaled_normal<R: Rng + ?Sized>(shape: (usize, usize), fan_in: usize, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).expect("positive std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}
