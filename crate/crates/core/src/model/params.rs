use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::{c, Real};
use crate::tensor::Tensor;

/// How a parameter tensor is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`
    FanIn(usize),
    Zeros,
    Ones,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn from_parts(names: Vec<String>, values: Vec<Tensor<T>>) -> Self {
        assert_eq!(names.len(), values.len());
        Self { names, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| &mut self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces all values, checking that shapes match.
    pub fn assign(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::InvalidConfig(alloc::format!(
                "{} tensors for {} parameters",
                values.len(),
                self.values.len()
            )));
        }
        for (i, (new, old)) in values.iter().zip(&self.values).enumerate() {
            if new.shape() != old.shape() {
                return Err(Error::ShapeMismatch {
                    op: "assign",
                    detail: alloc::format!("{}: {:?} vs {:?}", self.names[i], new.shape(), old.shape()),
                });
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Parameter declarations collected while the network structure is built.
#[derive(Default)]
pub(crate) struct Registry {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub inits: Vec<Init>,
}

impl Registry {
    pub fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    pub fn materialize<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = self
            .shapes
            .iter()
            .zip(&self.inits)
            .map(|(shape, init)| match *init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / Float::sqrt(fan_in as f64);
                    Tensor::from_fn(shape, |_| c::<T>(rng.gen_range(-bound..bound)))
                }
            })
            .collect();
        ParamStore {
            names: self.names.clone(),
            values,
        }
    }
}
