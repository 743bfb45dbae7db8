//! Named parameter container with a parallel gradient buffer.

use std::collections::BTreeMap;

use super::{RealMatrix, RealVector};
use crate::error::{Error, Result};

/// A single parameter value: either a matrix or a vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Matrix(RealMatrix),
    Vector(RealVector),
}

impl Tensor {
    pub fn len(&self) -> usize {
        match self {
            Tensor::Matrix(m) => m.as_slice().len(),
            Tensor::Vector(v) => v.dim(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Tensor::Matrix(m) => m.as_slice(),
            Tensor::Vector(v) => v.as_slice(),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Tensor::Matrix(m) => m.as_mut_slice(),
            Tensor::Vector(v) => v.as_mut_slice(),
        }
    }

    /// Zero tensor with the same shape.
    pub fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Matrix(m) => Tensor::Matrix(RealMatrix::zeros(m.rows(), m.cols())),
            Tensor::Vector(v) => Tensor::Vector(RealVector::zeros(v.dim())),
        }
    }

    pub fn shape_desc(&self) -> String {
        match self {
            Tensor::Matrix(m) => format!("matrix {}x{}", m.rows(), m.cols()),
            Tensor::Vector(v) => format!("vector {}", v.dim()),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        match (self, other) {
            (Tensor::Matrix(a), Tensor::Matrix(b)) => {
                a.rows() == b.rows() && a.cols() == b.cols()
            }
            (Tensor::Vector(a), Tensor::Vector(b)) => a.dim() == b.dim(),
            _ => false,
        }
    }
}

/// Named map from parameter name to value tensor, plus a gradient buffer
/// whose shapes always mirror the value shapes.
///
/// Iteration order is the lexicographic name order of the underlying
/// `BTreeMap`, which keeps optimizer updates and serialization deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    /// Adds a parameter with a zeroed gradient. Names must be unique.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.values.contains_key(name) {
            return Err(Error::Parameter(format!(
                "parameter '{name}' registered twice"
            )));
        }
        self.grads.insert(name.to_string(), value.zeros_like());
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    /// Typed accessors. Panicking on a kind mismatch is deliberate: parameter
    /// kinds are fixed at model construction, so a mismatch is a programming
    /// error, not a runtime condition.
    pub fn matrix(&self, name: &str) -> &RealMatrix {
        match self.value(name) {
            Tensor::Matrix(m) => m,
            Tensor::Vector(_) => panic!("parameter '{name}' is a vector, expected matrix"),
        }
    }

    pub fn vector(&self, name: &str) -> &RealVector {
        match self.value(name) {
            Tensor::Vector(v) => v,
            Tensor::Matrix(_) => panic!("parameter '{name}' is a matrix, expected vector"),
        }
    }

    pub fn grad_matrix(&self, name: &str) -> &RealMatrix {
        match self.grad(name) {
            Tensor::Matrix(m) => m,
            Tensor::Vector(_) => panic!("gradient '{name}' is a vector, expected matrix"),
        }
    }

    pub fn grad_vector(&self, name: &str) -> &RealVector {
        match self.grad(name) {
            Tensor::Vector(v) => v,
            Tensor::Matrix(_) => panic!("gradient '{name}' is a matrix, expected vector"),
        }
    }

    pub fn grad_matrix_mut(&mut self, name: &str) -> &mut RealMatrix {
        match self.grad_mut(name) {
            Tensor::Matrix(m) => m,
            Tensor::Vector(_) => panic!("gradient '{name}' is a vector, expected matrix"),
        }
    }

    pub fn grad_vector_mut(&mut self, name: &str) -> &mut RealVector {
        match self.grad_mut(name) {
            Tensor::Vector(v) => v,
            Tensor::Matrix(_) => panic!("gradient '{name}' is a matrix, expected vector"),
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            for x in g.as_mut_slice() {
                *x = 0.0;
            }
        }
    }

    /// Simultaneous read access to values and write access to gradients,
    /// needed by backprop routines that read weights while accumulating.
    pub fn split_mut(
        &mut self,
    ) -> (&BTreeMap<String, Tensor>, &mut BTreeMap<String, Tensor>) {
        (&self.values, &mut self.grads)
    }

    /// Per-name (value, grad) pairs for the optimizer, in name order.
    pub fn iter_mut_with_grads(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        let grads = &self.grads;
        self.values.iter_mut().map(move |(name, value)| {
            let grad = grads
                .get(name)
                .expect("gradient buffer mirrors value names");
            (name.as_str(), value, grad)
        })
    }

    // Flat-entry access used by the finite-difference checker.

    pub fn entry(&self, name: &str, idx: usize) -> f64 {
        self.value(name).as_slice()[idx]
    }

    pub fn entry_mut(&mut self, name: &str, idx: usize) -> &mut f64 {
        &mut self.value_mut(name).as_mut_slice()[idx]
    }

    pub fn grad_entry(&self, name: &str, idx: usize) -> f64 {
        self.grad(name).as_slice()[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_rejects_duplicate_names() {
        let mut p = ParameterSet::new();
        p.register("w", Tensor::Vector(RealVector::zeros(3))).unwrap();
        let again = p.register("w", Tensor::Vector(RealVector::zeros(3)));
        assert!(matches!(again, Err(Error::Parameter(_))));
    }

    #[test]
    fn gradient_buffer_mirrors_shapes() {
        let mut p = ParameterSet::new();
        p.register("m", Tensor::Matrix(RealMatrix::zeros(2, 3))).unwrap();
        p.register("v", Tensor::Vector(RealVector::zeros(5))).unwrap();
        for name in ["m", "v"] {
            assert!(p.value(name).same_shape(p.grad(name)));
        }
    }

    #[test]
    fn zero_grads_clears_everything() {
        let mut p = ParameterSet::new();
        p.register("v", Tensor::Vector(RealVector::zeros(2))).unwrap();
        p.grad_vector_mut("v")[0] = 7.0;
        p.zero_grads();
        assert_eq!(p.grad("v").as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn names_iterate_in_sorted_order() {
        let mut p = ParameterSet::new();
        p.register("zeta", Tensor::Vector(RealVector::zeros(1))).unwrap();
        p.register("alpha", Tensor::Vector(RealVector::zeros(1))).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, vec!["alpha", "zeta"]);
    }
}
