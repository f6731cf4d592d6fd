use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        Tensor::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f32, rng: &mut impl Rng) -> Self {
        Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
    }

    pub fn normal(shape: impl Into<Vec<usize>>, std: f32, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0f32, std).expect("std must be finite and positive");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named model weight.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Arc<Tensor>,
    pub trainable: bool,
}

/// Owns every parameter of a model; names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Param(format!("duplicate parameter name {name}")));
        }
        if !tensor.is_finite() {
            return Err(Error::Numeric(format!("parameter {name} initialized non-finite")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor: Arc::new(tensor), trainable: true });
        Ok(id)
    }

    /// Linear-layer weight: uniform in ±1/sqrt(fan_in).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    /// Embedding table: normal(0, 0.02).
    pub fn add_embedding(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        self.add(name, Tensor::normal(shape, 0.02, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replace a parameter's values; the shape must not change.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.tensor.shape(),
                tensor.shape()
            ));
        }
        p.tensor = Arc::new(tensor);
        Ok(())
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f32] {
        Arc::make_mut(&mut self.params[id.0].tensor).data_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar weights.
    pub fn num_floats(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn param_names_unique() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros([2])).unwrap();
        assert!(matches!(s.add("w", Tensor::zeros([2])), Err(Error::Param(_))));
    }

    #[test]
    fn set_keeps_shape() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros([2, 2])).unwrap();
        assert!(s.set(id, Tensor::zeros([4])).is_err());
        s.set(id, Tensor::eye(2)).unwrap();
        assert_eq!(s.tensor(id).data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}
