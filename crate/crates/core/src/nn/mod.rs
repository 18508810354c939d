//! Hand-differentiated layers over [`LatentSet`](crate::tensor::LatentSet)
//! activations, with parameters held in a flat named [`ParamStore`].

pub mod attention;
pub mod layers;

use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;
use crate::scalar::Scalar;

pub use attention::{Attention, AttentionCache};
pub use layers::{Conv2d, Conv3d, GroupNorm, GroupNormCache, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered named tensors. Gradients and optimizer moments reuse the same
/// layout via [`ParamStore::zeros_like`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param {name} size");
        assert!(self.find(&name).is_none(), "duplicate param {name}");
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::zero(); n])
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: T) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![v; n])
    }

    /// Gaussian with std `1/√fan_in`.
    pub fn fan_in(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        self.add(name, shape, data)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: vec![T::zero(); e.data.len()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for e in &mut self.entries {
            e.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }

    /// Flat `(entry, offset)` address of the `i`-th scalar.
    pub fn locate(&self, mut i: usize) -> (ParamId, usize) {
        for (k, e) in self.entries.iter().enumerate() {
            if i < e.data.len() {
                return (ParamId(k), i);
            }
            i -= e.data.len();
        }
        panic!("scalar index out of range");
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `dx = dy · silu'(x)`.
pub fn silu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &g)| g * silu_grad(v)).collect()
}

/// Sinusoidal embedding of an integer timestep (`dim` even).
pub fn timestep_embedding<T: Scalar>(k: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = k as f64 * freq;
        out[i] = T::from_f64_lossy(a.sin());
        out[half + i] = T::from_f64_lossy(a.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn store_layout_and_locate() {
        let mut rng = rng_from_seed(0);
        let mut s = ParamStore::<f64>::new();
        let a = s.fan_in("a", &[2, 3], 3, &mut rng);
        let b = s.zeros("b", &[4]);
        assert_eq!(s.n_scalars(), 10);
        assert_eq!(s.locate(7), (b, 1));
        assert_eq!(s.locate(5), (a, 5));
        let g = s.zeros_like();
        assert!(g.same_layout(&s));
        assert_eq!(s.find("b"), Some(b));
    }

    #[test]
    fn silu_grad_matches_difference() {
        for x in [-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let a = timestep_embedding::<f64>(3, 16);
        let b = timestep_embedding::<f64>(4, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
        assert_eq!(timestep_embedding::<f64>(0, 4), vec![0.0, 0.0, 1.0, 1.0]);
    }
}
