//! Named parameter storage with matching gradient buffers.

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Parameters keyed by name. Iteration order is lexicographic by name, so
/// anything derived from a walk over the tree is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    entries: BTreeMap<String, Param>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let shape = value.shape().to_vec();
        let value = value.into_data();
        let grad = vec![0.0; value.len()];
        self.entries.insert(name.to_string(), Param { shape, value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    /// Copy of the current value as a tensor.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let p = self.get(name)?;
        Ok(Tensor::new(&p.shape, p.value.clone()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn add_grad(&mut self, name: &str, grad: &[f64], weight: f64) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.len() != grad.len() {
            return Err(NnError::Shape {
                op: "add_grad",
                detail: format!("{name}: expected {} values, got {}", p.grad.len(), grad.len()),
            });
        }
        for (a, b) in p.grad.iter_mut().zip(grad) {
            *a += weight * b;
        }
        Ok(())
    }

    /// Global L2 norm over every gradient buffer.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.entries
            .values()
            .all(|p| p.grad.iter().all(|g| g.is_finite()))
    }

    pub fn set_value(&mut self, name: &str, value: &[f64]) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.len() != value.len() {
            return Err(NnError::Shape {
                op: "set_value",
                detail: format!("{name}: expected {} values, got {}", p.value.len(), value.len()),
            });
        }
        p.value.copy_from_slice(value);
        Ok(())
    }

    /// Sets every value of a parameter to `v`.
    pub fn fill(&mut self, name: &str, v: f64) -> Result<()> {
        self.get_mut(name)?.value.iter_mut().for_each(|x| *x = v);
        Ok(())
    }

    /// Rounds every stored value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            p.value.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut t = ParamTree::new();
        t.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(t.insert("a", Tensor::zeros(&[2])), Err(NnError::DuplicateParam(_))));
    }

    #[test]
    fn iteration_is_sorted_and_counts_params() {
        let mut t = ParamTree::new();
        t.insert("z", Tensor::zeros(&[2, 3])).unwrap();
        t.insert("a", Tensor::zeros(&[4])).unwrap();
        assert_eq!(t.names().collect::<Vec<_>>(), vec!["a", "z"]);
        assert_eq!(t.num_params(), 10);
        let p = t.get("z").unwrap();
        assert_eq!(p.grad.len(), p.value.len());
    }
}
