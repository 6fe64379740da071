use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Names with this prefix hold non-trainable metadata (normalization
/// statistics, configuration) and are skipped by the optimizer.
pub const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub(crate) adam: AdamState,
}

/// Named tensors iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        tensor.set_requires_grad(!name.starts_with(META_PREFIX));
        let n = tensor.numel();
        self.params.insert(
            name,
            Param {
                tensor,
                adam: AdamState {
                    step: 0,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            },
        );
        Ok(())
    }

    /// Inserts or replaces a metadata tensor under `meta.<key>`.
    pub fn set_meta(&mut self, key: &str, values: Vec<f64>) {
        let name = format!("{META_PREFIX}{key}");
        self.params.remove(&name);
        let t = if values.is_empty() {
            Tensor::zeros(&[1])
        } else {
            Tensor::from_vec(values)
        };
        self.insert(name, t).expect("removed above");
    }

    pub fn meta(&self, key: &str) -> Option<&[f64]> {
        self.get(&format!("{META_PREFIX}{key}")).map(Tensor::data)
    }

    /// Inserts a tensor drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.tensor.requires_grad())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))?;
        let shape = p.tensor.shape().to_vec();
        let Some(g) = p.tensor.grad_mut() else {
            return Ok(());
        };
        if g.len() != grad.len() {
            return Err(AutodiffError::dim("accumulate_grad", &shape, &[grad.len()]));
        }
        for (a, b) in g.iter_mut().zip(grad) {
            *a += b;
        }
        Ok(())
    }

    /// L2 norm over every trainable gradient.
    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn iteration_is_lexicographic_and_names_unique() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::zeros(&[1])).unwrap();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        s.insert("c.x", Tensor::zeros(&[1])).unwrap();
        let names: Vec<_> = s.names().collect();
        assert_eq!(names, ["a", "b", "c.x"]);
        assert!(matches!(
            s.insert("a", Tensor::zeros(&[1])),
            Err(AutodiffError::DuplicateParam(_))
        ));
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert_uniform("w", &[16, 16], 16, &mut rng).unwrap();
        let w = s.get("w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
        assert!(w.requires_grad());
    }

    #[test]
    fn meta_tensors_are_not_trainable() {
        let mut s = ParamStore::new();
        s.set_meta("mean", vec![1.0, 2.0]);
        assert_eq!(s.meta("mean"), Some(&[1.0, 2.0][..]));
        assert!(!s.get("meta.mean").unwrap().requires_grad());
        assert_eq!(s.num_trainable(), 0);
    }
}
