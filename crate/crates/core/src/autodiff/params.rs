use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Gradients, Graph, Var};
use crate::error::{ensure, Result};

/// Ordered, named parameter tree flattened to a list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it for weight decay.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
    }

    /// Weight matrix drawn from `N(0, std^2)`.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        rng: &mut impl Rng,
    ) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_fn(shape, |_| dist.sample(rng));
        self.insert(name, value, true);
    }

    /// Xavier-uniform weight matrix.
    pub fn xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a));
        self.insert(name, value, true);
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) {
        self.insert(name, Array2::zeros(shape), false);
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: (usize, usize)) {
        self.insert(name, Array2::ones(shape), false);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn decays(&self) -> &[bool] {
        &self.decay
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Fails unless `other` has the same names, order and shapes.
    pub fn check_same_tree(&self, other: &ParamSet) -> Result<()> {
        ensure!(
            self.len() == other.len(),
            Shape,
            "parameter trees differ in size: {} vs {}",
            self.len(),
            other.len()
        );
        for (i, name) in self.names.iter().enumerate() {
            ensure!(
                *name == other.names[i],
                Shape,
                "parameter {i}: {name} vs {}",
                other.names[i]
            );
            ensure!(
                self.values[i].dim() == other.values[i].dim(),
                Shape,
                "parameter {name}: {:?} vs {:?}",
                self.values[i].dim(),
                other.values[i].dim()
            );
        }
        Ok(())
    }

    /// Copies values from `other` for every name present in both.
    pub fn overwrite_from(&mut self, other: &ParamSet) -> Result<usize> {
        let mut n = 0;
        for (name, v) in other.iter() {
            if let Some(dst) = self.get_mut(name) {
                ensure!(
                    dst.dim() == v.dim(),
                    Shape,
                    "parameter {name}: {:?} vs {:?}",
                    dst.dim(),
                    v.dim()
                );
                dst.assign(v);
                n += 1;
            }
        }
        Ok(n)
    }
}

/// How a [`Binder`] materialises parameters in a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leaf {
    Param,
    Constant,
}

/// Lazily binds the parameters of a [`ParamSet`] as graph leaves, once each.
pub struct Binder<'a> {
    params: &'a ParamSet,
    vars: Vec<Option<Var>>,
    leaf: Leaf,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamSet, leaf: Leaf) -> Self {
        Binder {
            params,
            vars: vec![None; params.len()],
            leaf,
        }
    }

    /// Binds every parameter to a caller-supplied graph handle, in tree order.
    pub fn from_vars(params: &'a ParamSet, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), params.len(), "one handle per parameter");
        Binder {
            params,
            vars: vars.iter().copied().map(Some).collect(),
            leaf: Leaf::Constant,
        }
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    /// Panics on an unknown name: parameter names are fixed by model code.
    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let value = self.params.values[i].clone();
        let v = match self.leaf {
            Leaf::Param => g.param(value),
            Leaf::Constant => g.constant(value),
        };
        self.vars[i] = Some(v);
        v
    }

    /// Graph handles of the parameters that were bound, in tree order.
    pub fn bound(&self) -> Vec<Option<Var>> {
        self.vars.clone()
    }

    /// Per-parameter gradients (zeros for unbound or unreached parameters).
    pub fn collect(&self, grads: &Gradients) -> Vec<Array2<f64>> {
        self.vars
            .iter()
            .zip(self.params.values())
            .map(|(v, p)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Array2::zeros(p.dim()))
            })
            .collect()
    }
}
