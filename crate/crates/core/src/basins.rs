//! Polyhedral partitions of the initial-state space into destination basins.
//!
//! Basin `j` is `{x : n_jk · x ≤ o_jk for all k ≠ j}`. Points on a shared
//! boundary go to the lowest index.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub destination: usize,
    /// Set when no basin contained the point and the least-violated one was used.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct AffineBasins {
    normals: Vec<Vec<DVector<f64>>>,
    offsets: Vec<Vec<f64>>,
}

impl AffineBasins {
    pub fn new(normals: Vec<Vec<DVector<f64>>>, offsets: Vec<Vec<f64>>) -> Result<Self> {
        let l = normals.len();
        if l == 0
            || offsets.len() != l
            || normals.iter().any(|r| r.len() != l)
            || offsets.iter().any(|r| r.len() != l)
        {
            return Err(Error::invalid(
                "basins",
                "normals and offsets must be square tables of equal size",
            ));
        }
        let n = normals[0][0].len();
        if normals.iter().flatten().any(|v| v.len() != n) {
            return Err(Error::invalid("basins", "normals must share one dimension"));
        }
        Ok(Self { normals, offsets })
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.normals[0][0].len()
    }

    pub fn normal(&self, j: usize, k: usize) -> &DVector<f64> {
        &self.normals[j][k]
    }

    pub fn offset(&self, j: usize, k: usize) -> f64 {
        self.offsets[j][k]
    }

    pub fn offsets(&self) -> &[Vec<f64>] {
        &self.offsets
    }

    pub fn with_offsets(&self, offsets: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.normals.clone(), offsets)
    }

    /// Largest constraint violation of basin `j` at `x` (non-positive inside).
    pub fn violation(&self, j: usize, x: &DVector<f64>) -> f64 {
        (0..self.len())
            .filter(|&k| k != j)
            .map(|k| self.normals[j][k].dot(x) - self.offsets[j][k])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, j: usize, x: &DVector<f64>) -> bool {
        (0..self.len())
            .filter(|&k| k != j)
            .all(|k| self.normals[j][k].dot(x) <= self.offsets[j][k])
    }

    pub fn classify(&self, x: &DVector<f64>) -> Classification {
        if self.len() == 1 {
            return Classification {
                destination: 0,
                fallback: false,
            };
        }
        if let Some(j) = (0..self.len()).find(|&j| self.contains(j, x)) {
            return Classification {
                destination: j,
                fallback: false,
            };
        }
        let mut best = 0;
        let mut best_v = f64::INFINITY;
        for j in 0..self.len() {
            let v = self.violation(j, x);
            if v < best_v {
                best_v = v;
                best = j;
            }
        }
        Classification {
            destination: best,
            fallback: true,
        }
    }

    /// Classifies from precomputed projections `z[j][k] = n_jk · x`.
    pub fn classify_projected(&self, z: &[f64]) -> Classification {
        let l = self.len();
        if l == 1 {
            return Classification {
                destination: 0,
                fallback: false,
            };
        }
        let inside = |j: usize| {
            (0..l)
                .filter(|&k| k != j)
                .all(|k| z[j * l + k] <= self.offsets[j][k])
        };
        if let Some(j) = (0..l).find(|&j| inside(j)) {
            return Classification {
                destination: j,
                fallback: false,
            };
        }
        let mut best = 0;
        let mut best_v = f64::INFINITY;
        for j in 0..l {
            let v = (0..l)
                .filter(|&k| k != j)
                .map(|k| z[j * l + k] - self.offsets[j][k])
                .fold(f64::NEG_INFINITY, f64::max);
            if v < best_v {
                best_v = v;
                best = j;
            }
        }
        Classification {
            destination: best,
            fallback: true,
        }
    }

    /// `n_jk · x` for all pairs, flattened row-major.
    pub fn project(&self, x: &DVector<f64>) -> Vec<f64> {
        let l = self.len();
        let mut z = vec![0.0; l * l];
        for j in 0..l {
            for k in 0..l {
                if j != k {
                    z[j * l + k] = self.normals[j][k].dot(x);
                }
            }
        }
        z
    }
}
