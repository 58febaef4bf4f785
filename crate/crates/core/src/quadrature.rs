//! Gauss–Hermite quadrature for expectations under a normal distribution.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tridiag::tridiag_eigen;

/// Nodes and weights for `E[f(X)]`, `X ~ N(0, 1)`. Weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Eigen-decomposition of the Jacobi matrix of the probabilists' Hermite
    /// polynomials: zero diagonal, off-diagonal `√k`.
    pub fn new(points: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::InvalidInput("quadrature needs at least one node".into()));
        }
        let diag = alloc::vec![0.0; points];
        let off: Vec<f64> = (1..points).map(|k| (k as f64).sqrt()).collect();
        let eig = tridiag_eigen(&diag, &off)?;
        let weights = eig.first_components().iter().map(|v| v * v).collect();
        Ok(Self { nodes: eig.values, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[f(X)]` for `X ~ N(mean, var)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, mean: f64, var: f64, f: F) -> f64 {
        let sd = var.max(0.0).sqrt();
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(mean + sd * x)).sum()
    }
}
