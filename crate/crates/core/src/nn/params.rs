use serde::{Deserialize, Serialize};

use super::Real;

/// A named, shaped parameter array stored flat in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// The network's parameter vector. Every branch of a training step reads the
/// same store, so an update moves all of them at once.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.params.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = T> + '_ {
        self.params.iter().flat_map(|p| p.data.iter().copied())
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.iter_flat().collect()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (pi, p) in self.params.iter().enumerate() {
            if i < p.data.len() {
                return (pi, i);
            }
            i -= p.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flat(&self, i: usize) -> T {
        let (p, j) = self.locate(i);
        self.params[p].data[j]
    }

    pub fn set_flat(&mut self, i: usize, v: T) {
        let (p, j) = self.locate(i);
        self.params[p].data[j] = v;
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += scale * other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + scale * *y;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}
