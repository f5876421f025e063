//! Per-layer tabular storage shared by every module.
//!
//! Layers are indexed from 0 internally; layer `l` holds `layer_sizes[l]`
//! states and every state has the same `actions` count. A [`CellTable`] stores
//! one value per `(l, s, a)` cell, row-major in `(s, a)`. [`Transitions`]
//! stores `P_l(s' | s, a)` for `l < L - 1`; the last layer has no successor.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaporError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub layer_sizes: Vec<usize>,
    pub actions: usize,
}

impl Shape {
    pub fn new(layer_sizes: Vec<usize>, actions: usize) -> Self {
        Self {
            layer_sizes,
            actions,
        }
    }

    /// Horizon `L`.
    pub fn horizon(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn states(&self, l: usize) -> usize {
        self.layer_sizes[l]
    }

    /// Total state count `S = sum_l S_l`.
    pub fn total_states(&self) -> usize {
        self.layer_sizes.iter().sum()
    }

    pub fn total_cells(&self) -> usize {
        self.total_states() * self.actions
    }

    /// Largest per-layer state count.
    pub fn max_states(&self) -> usize {
        self.layer_sizes.iter().copied().max().unwrap_or(0)
    }
}

/// One `f64` per `(layer, state, action)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTable {
    pub actions: usize,
    pub layers: Vec<Vec<f64>>,
}

impl CellTable {
    pub fn filled(shape: &Shape, value: f64) -> Self {
        Self {
            actions: shape.actions,
            layers: shape
                .layer_sizes
                .iter()
                .map(|&n| vec![value; n * shape.actions])
                .collect(),
        }
    }

    pub fn zeros(shape: &Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: &Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let a_n = shape.actions;
        let layers = shape
            .layer_sizes
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                (0..n * a_n)
                    .map(|i| f(l, i / a_n, i % a_n))
                    .collect::<Vec<_>>()
            })
            .collect();
        Self {
            actions: a_n,
            layers,
        }
    }

    pub fn horizon(&self) -> usize {
        self.layers.len()
    }

    pub fn states(&self, l: usize) -> usize {
        self.layers[l].len() / self.actions.max(1)
    }

    #[inline]
    pub fn get(&self, l: usize, s: usize, a: usize) -> f64 {
        self.layers[l][s * self.actions + a]
    }

    #[inline]
    pub fn set(&mut self, l: usize, s: usize, a: usize, v: f64) {
        self.layers[l][s * self.actions + a] = v;
    }

    #[inline]
    pub fn row(&self, l: usize, s: usize) -> &[f64] {
        &self.layers[l][s * self.actions..(s + 1) * self.actions]
    }

    #[inline]
    pub fn row_mut(&mut self, l: usize, s: usize) -> &mut [f64] {
        let a_n = self.actions;
        &mut self.layers[l][s * a_n..(s + 1) * a_n]
    }

    pub fn shape(&self) -> Shape {
        Shape::new(
            (0..self.horizon()).map(|l| self.states(l)).collect(),
            self.actions,
        )
    }

    pub fn matches(&self, shape: &Shape) -> bool {
        self.actions == shape.actions
            && self.layers.len() == shape.horizon()
            && self
                .layers
                .iter()
                .zip(&shape.layer_sizes)
                .all(|(v, &n)| v.len() == n * shape.actions)
    }

    pub fn check_shape(&self, shape: &Shape, what: &str) -> Result<()> {
        if self.matches(shape) {
            Ok(())
        } else {
            Err(VaporError::Shape(format!(
                "{what}: table shape {:?} does not match {:?}",
                self.shape(),
                shape
            )))
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flatten()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            actions: self.actions,
            layers: self
                .layers
                .iter()
                .map(|v| v.iter().map(|&x| f(x)).collect())
                .collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        Self {
            actions: self.actions,
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(u, v)| u.iter().zip(v).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.iter().zip(other.iter()).map(|(x, y)| x * y).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Per-state totals `sum_a t_l(s, a)`.
    pub fn state_sums(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|v| v.chunks(self.actions).map(|c| c.iter().sum()).collect())
            .collect()
    }
}

/// Dense transition kernels `P_l(s' | s, a)` for layers `0..L-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transitions {
    pub shape: Shape,
    pub layers: Vec<Vec<f64>>,
}

impl Transitions {
    pub fn zeros(shape: &Shape) -> Self {
        let l_n = shape.horizon();
        let layers = (0..l_n.saturating_sub(1))
            .map(|l| vec![0.0; shape.states(l) * shape.actions * shape.states(l + 1)])
            .collect();
        Self {
            shape: shape.clone(),
            layers,
        }
    }

    /// Builds a deterministic kernel from a successor function.
    pub fn deterministic(shape: &Shape, next: impl Fn(usize, usize, usize) -> usize) -> Self {
        let mut p = Self::zeros(shape);
        for l in 0..p.layers.len() {
            for s in 0..shape.states(l) {
                for a in 0..shape.actions {
                    let sn = next(l, s, a);
                    p.row_mut(l, s, a)[sn] = 1.0;
                }
            }
        }
        p
    }

    #[inline]
    pub fn row(&self, l: usize, s: usize, a: usize) -> &[f64] {
        let n_next = self.shape.states(l + 1);
        let start = (s * self.shape.actions + a) * n_next;
        &self.layers[l][start..start + n_next]
    }

    #[inline]
    pub fn row_mut(&mut self, l: usize, s: usize, a: usize) -> &mut [f64] {
        let n_next = self.shape.states(l + 1);
        let start = (s * self.shape.actions + a) * n_next;
        &mut self.layers[l][start..start + n_next]
    }

    /// `sum_{s'} P_l(s'|s,a) v(s')`.
    #[inline]
    pub fn expect(&self, l: usize, s: usize, a: usize, v: &[f64]) -> f64 {
        self.row(l, s, a).iter().zip(v).map(|(p, x)| p * x).sum()
    }
}
