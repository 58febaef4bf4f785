//! Data and parameter containers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::likelihood::{Family, Likelihood};
use crate::linalg::{mean, sample_var};
use crate::sparse::{Incidence, ReStructure};

/// Response, fixed-effect covariates (row-major `n × p`) and the incidence
/// matrix of the grouping factors.
#[derive(Debug, Clone)]
pub struct GroupedDesign {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub p: usize,
    pub z: Incidence,
    pub structure: Option<ReStructure>,
    pub covariate_names: Vec<String>,
}

impl GroupedDesign {
    pub fn new(y: Vec<f64>, x: Vec<f64>, p: usize, z: Incidence) -> Result<Self> {
        let n = y.len();
        if z.n_rows() != n {
            return Err(Error::DimensionMismatch { expected: n, found: z.n_rows() });
        }
        if x.len() != n * p {
            return Err(Error::DimensionMismatch { expected: n * p, found: x.len() });
        }
        if y.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design data"));
        }
        Ok(Self { y, x, p, z, structure: None, covariate_names: Vec::new() })
    }

    pub fn with_structure(mut self, s: ReStructure) -> Self {
        self.structure = Some(s);
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_factors(&self) -> usize {
        self.z.n_factors()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// `F = X β`
    pub fn fixed_effects(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| self.x_row(i).iter().zip(beta).map(|(a, b)| a * b).sum()).collect()
    }

    /// `Xᵀ v`
    pub fn xt_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        for (i, vi) in v.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.x_row(i)) {
                *o += x * vi;
            }
        }
        out
    }

    /// Rows selected by index, sharing the level dictionaries.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut x = Vec::with_capacity(rows.len() * self.p);
        for &r in rows {
            x.extend_from_slice(self.x_row(r));
        }
        Self {
            y: rows.iter().map(|&r| self.y[r]).collect(),
            x,
            p: self.p,
            z: self.z.select_rows(rows),
            structure: self.structure.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Variance components `σ_k²`, error variance `σ²` (Gaussian only) and
/// regression coefficients `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub re_variances: Vec<f64>,
    pub error_variance: Option<f64>,
    pub beta: Vec<f64>,
}

impl ModelParams {
    /// Starting values: `σ_k² = var(y)/(K+1)`, `σ² = var(y)/2`, `β = 0`
    /// except the intercept set to `mean(y)` for Gaussian responses. Bernoulli
    /// responses start from `σ_k² = 1/(K+1)`.
    pub fn initial(design: &GroupedDesign, family: Family, intercept_col: Option<usize>) -> Self {
        let k = design.n_factors();
        let mut beta = vec![0.0; design.p];
        match family {
            Family::Gaussian => {
                let v = sample_var(&design.y).max(1e-8);
                if let Some(c) = intercept_col {
                    beta[c] = mean(&design.y);
                }
                Self { re_variances: vec![v / (k as f64 + 1.0); k], error_variance: Some(v / 2.0), beta }
            }
            Family::Bernoulli => Self { re_variances: vec![1.0 / (k as f64 + 1.0); k], error_variance: None, beta },
        }
    }

    pub fn likelihood(&self, family: Family) -> Result<Likelihood> {
        match family {
            Family::Gaussian => {
                let s = self.error_variance.ok_or_else(|| {
                    Error::InvalidInput("gaussian likelihood needs an error variance".into())
                })?;
                Ok(Likelihood::Gaussian { sigma2: s })
            }
            Family::Bernoulli => Ok(Likelihood::BernoulliLogit),
        }
    }

    pub fn validate(&self, design: &GroupedDesign, family: Family) -> Result<()> {
        if self.re_variances.len() != design.n_factors() {
            return Err(Error::DimensionMismatch { expected: design.n_factors(), found: self.re_variances.len() });
        }
        if self.beta.len() != design.p {
            return Err(Error::DimensionMismatch { expected: design.p, found: self.beta.len() });
        }
        for (index, &v) in self.re_variances.iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositive { index, value: v });
            }
        }
        if family == Family::Gaussian {
            match self.error_variance {
                Some(s) if s > 0.0 && s.is_finite() => {}
                Some(s) => return Err(Error::NonPositive { index: self.re_variances.len(), value: s }),
                None => return Err(Error::InvalidInput("gaussian likelihood needs an error variance".into())),
            }
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("regression coefficients"));
        }
        Ok(())
    }

    /// `Σ⁻¹` diagonal, one entry per level.
    pub fn sigma_inv(&self, z: &Incidence) -> Vec<f64> {
        let mut out = Vec::with_capacity(z.n_cols());
        for (k, &v) in self.re_variances.iter().enumerate() {
            out.extend(core::iter::repeat(1.0 / v).take(z.factor_range(k).len()));
        }
        out
    }

    /// Unconstrained vector `(log σ_k², [log σ²], β)`.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.re_variances.iter().map(|s| s.ln()).collect();
        if let Some(s) = self.error_variance {
            v.push(s.ln());
        }
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn from_unconstrained(&self, v: &[f64]) -> Self {
        let k = self.re_variances.len();
        let mut pos = k;
        let re_variances = v[..k].iter().map(|x| x.exp()).collect();
        let error_variance = self.error_variance.map(|_| {
            pos += 1;
            v[k].exp()
        });
        Self { re_variances, error_variance, beta: v[pos..].to_vec() }
    }
}
