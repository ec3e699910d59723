use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Ordered set of named `f32` parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor, or replaces the tensor already stored under `name`.
    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) -> usize {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = tensor;
            return i;
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<f32> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.tensors[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Checks that `other` has the same names and shapes, in order.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::contract(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        for i in 0..self.len() {
            if self.names[i] != other.names[i] {
                return Err(Error::contract(format!(
                    "parameter {i}: expected `{}`, found `{}`",
                    self.names[i], other.names[i]
                )));
            }
            if self.tensors[i].shape() != other.tensors[i].shape() {
                return Err(Error::shape(
                    "parameter load",
                    self.tensors[i].shape(),
                    other.tensors[i].shape(),
                ));
            }
        }
        Ok(())
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind<T: Real>(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| graph.leaf(t.cast(), trainable))
                .collect(),
        }
    }

    /// Gradients of bound parameters, converted to `f32`, in parameter order.
    pub fn collect_grads<T: Real>(&self, graph: &Graph<T>, bound: &Bound) -> Vec<Option<Vec<f32>>> {
        bound
            .vars
            .iter()
            .map(|v| {
                graph
                    .grad(*v)
                    .map(|g| g.iter().map(|x| x.to_f64() as f32).collect())
            })
            .collect()
    }
}

/// Graph handles of a bound [`ParamSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, params: &ParamSet, name: &str) -> Result<Var> {
        params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }
}
