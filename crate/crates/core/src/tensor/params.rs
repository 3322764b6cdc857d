use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in registration order. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Gaussian initialisation with standard deviation `std`.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    /// `fan_in x fan_out` weight with std `1/sqrt(fan_in)`.
    pub fn add_weight<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<ParamId> {
        self.add_normal(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![1.0; n])?, true)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.data.len())
            .sum()
    }
}
