//! Named parameter tensors and their binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Gradients, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Add every tensor to `g`, either as differentiable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Tensors in name order, the order `bind_vars` expects.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.tensors.values().cloned().collect()
    }

    /// Name the given graph variables, one per tensor in name order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.len() {
            return Err(Error::Contract(format!("{} variables for {} parameters", vars.len(), self.len())));
        }
        Ok(Bound {
            vars: self.tensors.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    /// Round every entry through `f32`, as stored in checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Fail unless `other` has the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(shape_err!(
                    "parameter {name}: {:?} vs {:?}",
                    t.shape(),
                    o.shape()
                ));
            }
        }
        if other.len() != self.len() {
            return Err(Error::Contract(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// Parameter name → graph variable for one recorded computation.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    /// Gradients per parameter name; parameters off the loss path are absent.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g)))
            .collect()
    }
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Gaussian init scaled by `1/sqrt(fan_in)`.
pub(crate) fn fan_in(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    normal(rng, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::full(&[1, 2], 2.0));
        p.insert("b", Tensor::full(&[1, 2], 3.0));
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let a = bound.var("a").unwrap();
        let s = g.square(a).unwrap();
        let l = g.sum_all(s).unwrap();
        let grads = g.backward(l).unwrap();
        let got = bound.collect(&grads);
        assert_eq!(got["a"].data(), &[4.0, 4.0]);
        assert!(!got.contains_key("b"));
    }

    #[test]
    fn layout_mismatch() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::zeros(&[2, 2]));
        let mut q = ParamStore::new();
        q.insert("a", Tensor::zeros(&[2, 3]));
        assert!(p.check_layout(&q).is_err());
        assert!(p.check_layout(&p.clone()).is_ok());
    }
}
