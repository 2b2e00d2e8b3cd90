//! Dense 64-bit tensors and named parameter collections.
//!
//! Tensors are rank 0 (scalar), 1 (vector) or 2 (matrix); that covers every
//! quantity in the model. Parameters live in a [`ParamSet`] keyed by a
//! path-like name (`"enc.lstm.w"`), iterated in sorted order so that
//! optimizer updates, checkpoints and gradient accumulation are all
//! deterministic.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

/// Dense tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating that the shape matches the data length and
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Standard-normal draws scaled by `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op: "dims2",
                detail: format!("expected matrix, got shape {:?}", self.shape),
            }),
        }
    }

    /// Element of a rank-2 tensor at (row, col).
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }
}

/// One named parameter: value plus an always-allocated gradient buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named parameter collection with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name {name:?}")));
        }
        let grad = vec![0.0; value.numel()];
        self.map.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name:?}")))
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.map
            .get(name)
            .map(|p| p.grad.as_slice())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> Vec<&str> {
        self.map.keys().map(|s| s.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add `scale * delta` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64], scale: f64) -> Result<()> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name:?}")))?;
        if p.grad.len() != delta.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("{name:?}: grad len {} vs delta len {}", p.grad.len(), delta.len()),
            });
        }
        for (g, d) in p.grad.iter_mut().zip(delta) {
            *g += scale * d;
        }
        Ok(())
    }

    /// Global L2 norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiply every gradient entry by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.map.values_mut() {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn new_rejects_shape_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(3.5);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 3.5);
        assert_eq!(t.numel(), 1);
    }

    #[test]
    fn randn_scale_and_determinism() {
        let mut rng = rng_from_seed(1);
        let a = Tensor::randn(&[1000], 0.02, &mut rng);
        let var = a.data().iter().map(|v| v * v).sum::<f64>() / 1000.0;
        assert!((var.sqrt() - 0.02).abs() < 0.005, "std {} far from 0.02", var.sqrt());
        let mut rng2 = rng_from_seed(1);
        let b = Tensor::randn(&[1000], 0.02, &mut rng2);
        assert_eq!(a, b);
    }

    #[test]
    fn paramset_sorted_and_unique() {
        let mut ps = ParamSet::new();
        ps.insert("b", Tensor::zeros(&[2])).unwrap();
        ps.insert("a", Tensor::zeros(&[3])).unwrap();
        assert_eq!(ps.names(), vec!["a", "b"]);
        assert!(ps.insert("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn grad_accumulation_and_norm() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[2])).unwrap();
        ps.accumulate_grad("w", &[3.0, 4.0], 1.0).unwrap();
        assert!((ps.grad_norm() - 5.0).abs() < 1e-12);
        ps.accumulate_grad("w", &[3.0, 4.0], -1.0).unwrap();
        assert_eq!(ps.grad("w").unwrap(), &[0.0, 0.0]);
        assert!(ps.accumulate_grad("w", &[1.0], 1.0).is_err());
    }
}
