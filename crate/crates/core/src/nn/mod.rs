//! Numerical substrate: named parameter tensors, Xavier initialization, Adam,
//! global-norm clipping, a central-difference gradient checker and the
//! checkpoint container.
//!
//! Everything runs in `f64`. Gradients are written by hand per layer (see
//! [`layers`]); there is no general autodiff.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, Rng64};

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{adam_step, clip_gradients, AdamConfig, OptimizerState};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape: shape.to_vec(), values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
///
/// For a 2-D shape `[out, in]` the fans are `in` and `out`; a 1-D shape uses
/// its length for both. The stream depends on `(shape, seed, name)` only.
pub fn xavier_init(name: &str, shape: &[usize], seed: u64) -> ParamTensor {
    let (fan_out, fan_in) = match shape {
        [n] => (*n, *n),
        [out, inp] => (*out, *inp),
        [out, rest @ ..] => (*out, rest.iter().product()),
        [] => (1, 1),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut key = name.as_bytes().to_vec();
    for d in shape {
        key.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    let mut rng = Rng64::new(seed ^ fnv1a(&key));
    let mut t = ParamTensor::zeros(name, shape);
    for v in &mut t.values {
        *v = rng.uniform(-bound, bound);
    }
    t
}

/// All trainable tensors of a model, in construction order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, tensor: ParamTensor) -> ParamId {
        debug_assert!(self.tensors.iter().all(|t| t.name != tensor.name), "duplicate {}", tensor.name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].values
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].values
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { tensors: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(t.name.clone()));
            }
        }
        Ok(())
    }
}

/// Gradients laid out like the [`ParamStore`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}
