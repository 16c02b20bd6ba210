//! Named parameter storage with a frozen/trainable partition.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Mat;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub trainable: bool,
}

/// Ordered map from parameter name to tensor. Iteration order is the
/// lexicographic name order, which fixes every reduction over parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Mat {
        &self.params[name].value
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.params.get_mut(name) {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn any_trainable_with_prefix(&self, prefix: &str) -> bool {
        self.iter().any(|(n, p)| p.trainable && n.starts_with(prefix))
    }

    pub fn count_total(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_follow_partition() {
        let mut s = ParamStore::new();
        s.insert("a.w", Mat::zeros((3, 4)), false);
        s.insert("b.w", Mat::zeros((2, 2)), true);
        assert_eq!(s.count_total(), 16);
        assert_eq!(s.count_trainable(), 4);
        assert_eq!(s.trainable_names(), vec!["b.w".to_string()]);
        s.set_trainable("a.w", true);
        assert_eq!(s.count_trainable(), 16);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = trunc_normal(&mut rng, 50, 50, 0.02);
        assert!(m.iter().all(|v| v.abs() <= 0.04));
        let mean = m.sum() / m.len() as f64;
        assert!(mean.abs() < 2e-3);
    }
}
