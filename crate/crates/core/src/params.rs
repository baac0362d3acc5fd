//! Named trainable tensors.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};
use crate::Error;

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Parameter<T> {
    name: String,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
}

/// Ordered, name-addressed collection of trainable tensors and their
/// accumulated gradients. Registration order is the checkpoint order.
#[derive(Clone)]
pub struct ParameterStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> std::fmt::Debug for ParameterStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.params.iter().map(|p| (&p.name, p.value.shape())))
            .finish()
    }
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wrap handles already on a tape, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, Error> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Register a conv weight `[cout, cin, k, k]` drawn from
    /// `U(-1/sqrt(cin*k*k), 1/sqrt(cin*k*k))`.
    pub fn register_fan_in<R: Rng>(
        &mut self,
        name: &str,
        shape: Shape,
        rng: &mut R,
    ) -> Result<ParamId, Error> {
        let fan_in = (shape.c() * shape.h() * shape.w()) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let value = Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)));
        self.register(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Set every parameter to zero.
    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(T::zero());
        }
    }

    /// Overwrite every parameter (biases included) with `U(-scale, scale)`.
    pub fn randomize<R: Rng>(&mut self, scale: f64, rng: &mut R) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = T::from_f64_lossy(rng.random_range(-scale..scale));
            }
        }
    }

    /// Record every parameter on `tape` as a grad-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), true))
                .collect(),
        }
    }

    /// Gradients from a finished backward pass, in parameter order.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &BoundParams) -> Result<Vec<Tensor<T>>, Error> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| {
                tape.grad(v)
                    .cloned()
                    .ok_or_else(|| Error::MissingGradient(p.name.clone()))
            })
            .collect()
    }

    /// Replace the accumulated gradient buffers.
    pub fn set_grads(&mut self, grads: Vec<Tensor<T>>) -> Result<(), Error> {
        if grads.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} gradients, got {}",
                self.params.len(),
                grads.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Invalid(format!(
                    "gradient for {} has shape {}, expected {}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            p.grad = Some(g);
        }
        Ok(())
    }

    /// Take the gradient of one parameter, leaving the slot empty.
    pub fn take_grad(&mut self, id: ParamId) -> Option<Tensor<T>> {
        self.params[id.0].grad.take()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copy of this store converted to another precision. Gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
