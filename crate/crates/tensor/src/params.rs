use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor plus its AdamW state.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named, ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, decay: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n = value.len();
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
            decay,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    /// Normal(0, std) initialization.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
        let t = Tensor::new(shape, data).expect("shape");
        self.add(name, t, shape.len() >= 2)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), false)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, T::one()), false)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values from `other` for every parameter name both stores share.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let Some(id) = other.id(&p.name) else {
                return Err(TensorError::Checkpoint(format!("missing parameter {}", p.name)));
            };
            let src = other.get(id);
            if src.value.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load",
                    left: p.value.shape().to_vec(),
                    right: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
            p.first_moment = src.first_moment.clone();
            p.second_moment = src.second_moment.clone();
            p.step = src.step;
        }
        Ok(())
    }
}

/// Gradient buffers indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, p)| vec![T::zero(); p.value.len()])
                .collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        for (d, &s) in self.grads[id.0].iter_mut().zip(g) {
            *d = *d + s;
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    pub fn norm_of(&self, id: ParamId) -> T {
        self.grads[id.0].iter().map(|&g| g * g).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            *g = *g * factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}
