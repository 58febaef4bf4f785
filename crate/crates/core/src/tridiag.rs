//! Symmetric tridiagonal eigenproblems: implicit QL iteration with Wilkinson
//! shifts, plus the quadrature forms built on top of it.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Symmetric tridiagonal matrix with `diag.len() == off.len() + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SymTridiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

/// Eigenvalues in ascending order and the matching eigenvectors, stored column
/// by column (`vectors[j * n + i]` is component `i` of eigenvector `j`).
#[derive(Debug, Clone)]
pub struct TridiagEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

impl TridiagEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        let n = self.dim();
        &self.vectors[j * n..(j + 1) * n]
    }

    /// First component of every eigenvector.
    pub fn first_components(&self) -> Vec<f64> {
        (0..self.dim()).map(|j| self.vectors[j * self.dim()]).collect()
    }
}

impl SymTridiag {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Result<Self> {
        if diag.is_empty() || off.len() + 1 != diag.len() {
            return Err(Error::DimensionMismatch { expected: diag.len().saturating_sub(1), found: off.len() });
        }
        Ok(Self { diag, off })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = self.diag[i];
            if i + 1 < n {
                a[i * n + i + 1] = self.off[i];
                a[(i + 1) * n + i] = self.off[i];
            }
        }
        a
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                v += self.off[i] * x[i + 1];
            }
            y[i] = v;
        }
    }

    pub fn eigen(&self) -> Result<TridiagEigen> {
        tridiag_eigen(&self.diag, &self.off)
    }

    /// `e₁ᵀ f(T) e₁ = Σ_j τ_j² f(λ_j)` with `τ_j` the first eigenvector components.
    pub fn quadrature<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let eig = self.eigen()?;
        let n = eig.dim();
        Ok((0..n).map(|j| {
            let t = eig.vectors[j * n];
            t * t * f(eig.values[j])
        }).sum())
    }

    /// `e₁ᵀ log(T) e₁`; requires a positive spectrum.
    pub fn log_quadrature(&self) -> Result<f64> {
        let eig = self.eigen()?;
        let n = eig.dim();
        let mut acc = 0.0;
        for j in 0..n {
            let lam = eig.values[j];
            if !(lam > 0.0) {
                return Err(Error::NotPositiveDefinite { index: j, pivot: lam });
            }
            let t = eig.vectors[j * n];
            acc += t * t * lam.ln();
        }
        Ok(acc)
    }

    /// Solves `T x = b` by the Thomas algorithm; `T` must be positive definite.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut denom = self.diag[0];
        if !(denom > 0.0) {
            return Err(Error::NotPositiveDefinite { index: 0, pivot: denom });
        }
        d[0] = b[0] / denom;
        for i in 1..n {
            c[i - 1] = self.off[i - 1] / denom;
            denom = self.diag[i] - self.off[i - 1] * c[i - 1];
            if !(denom > 0.0) {
                return Err(Error::NotPositiveDefinite { index: i, pivot: denom });
            }
            d[i] = (b[i] - self.off[i - 1] * d[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }
}

/// Eigen-decomposition of a symmetric tridiagonal matrix.
pub fn tridiag_eigen(diag: &[f64], off: &[f64]) -> Result<TridiagEigen> {
    let n = diag.len();
    if n == 0 || off.len() + 1 != n {
        return Err(Error::DimensionMismatch { expected: n.saturating_sub(1), found: off.len() });
    }
    if diag.iter().chain(off).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tridiagonal entries"));
    }
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(off);
    // z[j * n + i]: component i of vector j.
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::Unsupported("tridiagonal QL iteration did not converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let (zi, zi1) = (i * n, (i + 1) * n);
                for k in 0..n {
                    let t = z[zi1 + k];
                    z[zi1 + k] = s * z[zi + k] + c * t;
                    z[zi + k] = c * z[zi + k] - s * t;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap_or(core::cmp::Ordering::Equal));
    let values = order.iter().map(|&j| d[j]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &j in &order {
        vectors.extend_from_slice(&z[j * n..(j + 1) * n]);
    }
    Ok(TridiagEigen { values, vectors })
}
