use rand::Rng;

use super::{Scalar, Tensor};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named parameters in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique.
    ///
    /// # Panics
    /// On a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(ParamTensor { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Uniform(−a, a) init with a = sqrt(6 / fan_in) · gain.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> ParamId {
        let a = gain * (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.random_range(-a..a))).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("shape/len agree"))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Converts every parameter (values only) to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| ParamTensor { name: p.name.clone(), value: p.value.cast(), grad: Tensor::zeros(p.value.shape()) })
                .collect(),
        }
    }

    /// Adds `other`'s gradients into ours, parameter by parameter.
    ///
    /// # Panics
    /// If the stores do not have the same layout.
    pub fn accumulate_grads_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.grad.data_mut().iter_mut().zip(b.grad.data()) {
                *x = *x + *y;
            }
        }
    }

    /// Scales all gradients by `s`.
    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }
}
