use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered table of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        check_shape(shape, data.len())?;
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid {
                op: "ParamStore::insert",
                reason: format!("duplicate parameter name {name:?}"),
            });
        }
        let id = ParamId(self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(data);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> Tensor<T> {
        Tensor::new(&self.shapes[id.0], self.values[id.0].clone()).expect("stored shape is valid")
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Same names and shapes, values cast to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|&x| U::from_f64(x.as_f64())).collect())
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn zeros_like(&self) -> GradBuffer<T> {
        GradBuffer {
            grads: self.values.iter().map(|v| vec![T::zero(); v.len()]).collect(),
        }
    }
}

/// One gradient slot per parameter of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer<T> {
    pub(crate) grads: Vec<Vec<T>>,
}

impl<T: Scalar> GradBuffer<T> {
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

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Euclidean norm over all slots, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean norm over the selected slots.
    pub fn norm_of<I: IntoIterator<Item = ParamId>>(&self, ids: I) -> f64 {
        ids.into_iter()
            .flat_map(|id| self.grads[id.0].iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
