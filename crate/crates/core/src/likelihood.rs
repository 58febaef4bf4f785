//! Response log-densities and their first three derivatives in the linear
//! predictor.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Gaussian,
    Bernoulli,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Some(Family::Gaussian),
            "bernoulli" | "bernoulli_logit" | "binary" | "logit" => Some(Family::Bernoulli),
            _ => None,
        }
    }
}

/// Response distribution with its auxiliary parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    /// Identity link with error variance `sigma2 > 0`.
    Gaussian { sigma2: f64 },
    /// Logit link.
    BernoulliLogit,
}

/// Log-density and its derivatives with respect to every `μ_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivStack {
    pub logp: f64,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub d3: Vec<f64>,
}

impl DerivStack {
    /// `W_ii = −d2_i`
    pub fn w(&self) -> Vec<f64> {
        self.d2.iter().map(|v| -v).collect()
    }
}

/// Logistic function; both branches avoid overflow of `exp`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))`
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Likelihood {
    pub fn family(&self) -> Family {
        match self {
            Likelihood::Gaussian { .. } => Family::Gaussian,
            Likelihood::BernoulliLogit => Family::Bernoulli,
        }
    }

    pub fn validate_response(&self, y: &[f64]) -> Result<()> {
        match self {
            Likelihood::Gaussian { sigma2 } => {
                if !(*sigma2 > 0.0) || !sigma2.is_finite() {
                    return Err(Error::NonPositive { index: 0, value: *sigma2 });
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("response"));
                }
            }
            Likelihood::BernoulliLogit => {
                if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidInput(alloc::format!(
                        "bernoulli response at row {i} is {} but must be 0 or 1",
                        y[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// `Σ_i log p(y_i | μ_i)`
    pub fn log_density(&self, y: &[f64], mu: &[f64]) -> f64 {
        match *self {
            Likelihood::Gaussian { sigma2 } => {
                let c = -0.5 * (2.0 * PI * sigma2).ln();
                y.iter().zip(mu).map(|(y, m)| c - 0.5 * (y - m) * (y - m) / sigma2).sum()
            }
            Likelihood::BernoulliLogit => y.iter().zip(mu).map(|(y, m)| y * m - softplus(*m)).sum(),
        }
    }

    pub fn eval_derivs(&self, y: &[f64], mu: &[f64]) -> Result<DerivStack> {
        if y.len() != mu.len() {
            return Err(Error::DimensionMismatch { expected: y.len(), found: mu.len() });
        }
        self.validate_response(y)?;
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear predictor"));
        }
        let n = y.len();
        let logp = self.log_density(y, mu);
        let (d1, d2, d3) = match *self {
            Likelihood::Gaussian { sigma2 } => (
                y.iter().zip(mu).map(|(y, m)| (y - m) / sigma2).collect(),
                alloc::vec![-1.0 / sigma2; n],
                alloc::vec![0.0; n],
            ),
            Likelihood::BernoulliLogit => {
                let mut d1 = Vec::with_capacity(n);
                let mut d2 = Vec::with_capacity(n);
                let mut d3 = Vec::with_capacity(n);
                for (y, m) in y.iter().zip(mu) {
                    let p = sigmoid(*m);
                    let w = p * (1.0 - p);
                    d1.push(y - p);
                    d2.push(-w);
                    d3.push(-w * (1.0 - 2.0 * p));
                }
                (d1, d2, d3)
            }
        };
        Ok(DerivStack { logp, d1, d2, d3 })
    }

    /// Mean of the response given the linear predictor.
    pub fn inverse_link(&self, mu: f64) -> f64 {
        match self {
            Likelihood::Gaussian { .. } => mu,
            Likelihood::BernoulliLogit => sigmoid(mu),
        }
    }
}
