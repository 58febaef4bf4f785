//! Exact dense Cholesky reference for every quantity the Krylov path
//! approximates. Sizes are capped; the oracle is for validation, not speed.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Dyn};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::inference::{Backend, EvalConfig, Evaluator, NllBundle};
use crate::likelihood::Family;
use crate::model::{GroupedDesign, ModelParams};
use crate::predict::{PredictConfig, PredictionSpec, PredictiveDist, VarianceMethod};
use crate::sparse::{Incidence, NormalMatrix};

/// Default upper bound on the dense dimension.
pub const DEFAULT_CAP: usize = 5000;

/// Dense Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct DenseFactor {
    chol: nalgebra::Cholesky<f64, Dyn>,
}

impl DenseFactor {
    pub fn from_normal(m: &NormalMatrix, cap: usize) -> Result<Self> {
        if m.dim() > cap {
            return Err(Error::CapExceeded { cap, requested: m.dim() });
        }
        let n = m.dim();
        Self::from_dense(DMatrix::from_row_slice(n, n, &m.to_dense()))
    }

    pub fn from_dense(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let chol = nalgebra::Cholesky::new(a).ok_or(Error::NotPositiveDefinite { index: n, pivot: f64::NAN })?;
        Ok(Self { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn logdet(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let x = self.chol.solve(&DVector::from_column_slice(b));
        x.as_slice().to_vec()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Exact negative log-marginal likelihood and gradients.
pub fn chol_nll(
    design: &GroupedDesign,
    family: Family,
    params: &ModelParams,
    with_grad: bool,
    cap: usize,
) -> Result<NllBundle> {
    let cfg = EvalConfig { backend: Backend::Cholesky, oracle_cap: cap, ..EvalConfig::default() };
    let mut ev = Evaluator::new(design, family, cfg)?;
    ev.evaluate(params, with_grad)
}

/// Gaussian negative log-likelihood from the dense `n × n` covariance
/// `Ψ = ZΣZᵀ + σ²I`, without Woodbury or determinant-lemma rewrites.
pub fn naive_gaussian_nll(design: &GroupedDesign, params: &ModelParams) -> Result<f64> {
    let n = design.n();
    let psi = naive_psi(&design.z, params)?;
    let f = DenseFactor::from_dense(psi)?;
    let fx = design.fixed_effects(&params.beta);
    let r: Vec<f64> = design.y.iter().zip(&fx).map(|(a, b)| a - b).collect();
    let a = f.solve(&r);
    let quad: f64 = r.iter().zip(&a).map(|(x, y)| x * y).sum();
    Ok(0.5 * n as f64 * (2.0 * core::f64::consts::PI).ln() + 0.5 * f.logdet() + 0.5 * quad)
}

fn naive_psi(z: &Incidence, params: &ModelParams) -> Result<DMatrix<f64>> {
    let n = z.n_rows();
    let s2 = params
        .error_variance
        .ok_or_else(|| Error::InvalidInput("gaussian likelihood needs an error variance".into()))?;
    let mut psi = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut v = 0.0;
            for (k, (a, b)) in z.row(i).iter().zip(z.row(j)).enumerate() {
                if a == b {
                    v += params.re_variances[k];
                }
            }
            psi[(i, j)] = v;
            psi[(j, i)] = v;
        }
        psi[(i, i)] += s2;
    }
    Ok(psi)
}

/// Exact Fisher information of the Gaussian model in the natural variance
/// parameters `(σ_1², …, σ_K², σ²)`, row-major `(K+1) × (K+1)`.
pub fn chol_fisher(design: &GroupedDesign, params: &ModelParams, cap: usize) -> Result<Vec<f64>> {
    params.validate(design, Family::Gaussian)?;
    let z = &design.z;
    let m_dim = z.n_cols();
    let k = z.n_factors();
    let s2 = params.error_variance.expect("validated");
    let w = 1.0 / s2;
    let sinv = params.sigma_inv(z);
    let pattern = crate::sparse::NormalPattern::new(z);
    let m = pattern.assemble(&vec![w; design.n()], &sinv)?;
    let f = DenseFactor::from_normal(&m, cap)?;
    let minv = f.inverse();
    // H = ZᵀΨ⁻¹Z = Σ⁻¹ − Σ⁻¹M⁻¹Σ⁻¹ and G = ZᵀWZ = M − Σ⁻¹.
    let mut h = DMatrix::<f64>::zeros(m_dim, m_dim);
    for i in 0..m_dim {
        for j in 0..m_dim {
            h[(i, j)] = -sinv[i] * minv[(i, j)] * sinv[j];
        }
        h[(i, i)] += sinv[i];
    }
    let mut g = DMatrix::from_row_slice(m_dim, m_dim, &m.to_dense());
    for i in 0..m_dim {
        g[(i, i)] -= sinv[i];
    }
    let q = k + 1;
    let mut out = vec![0.0; q * q];
    for a in 0..k {
        let ra = z.factor_range(a);
        for b in 0..k {
            let rb = z.factor_range(b);
            let mut acc = 0.0;
            for i in ra.clone() {
                for j in rb.clone() {
                    acc += h[(i, j)] * h[(i, j)];
                }
            }
            out[a * q + b] = 0.5 * acc;
        }
    }
    // tr(Ψ⁻¹ Z_k Z_kᵀ Ψ⁻¹) = w · tr_k(Σ⁻¹M⁻¹GM⁻¹Σ⁻¹)
    let mg = &minv * &g;
    let mgm = &mg * &minv;
    for a in 0..k {
        let acc: f64 = z.factor_range(a).map(|i| sinv[i] * sinv[i] * mgm[(i, i)]).sum();
        out[a * q + k] = 0.5 * w * acc;
        out[k * q + a] = 0.5 * w * acc;
    }
    // tr(Ψ⁻²) = w²(n − 2 tr(M⁻¹G) + tr(M⁻¹GM⁻¹G))
    let tr1 = mg.trace();
    let tr2 = (&mg * &mg).trace();
    out[k * q + k] = 0.5 * w * w * (design.n() as f64 - 2.0 * tr1 + tr2);
    Ok(out)
}

/// Exact predictive means and variances from the dense factor of `M`.
pub fn chol_predict(
    design: &GroupedDesign,
    family: Family,
    params: &ModelParams,
    spec: &PredictionSpec,
    cap: usize,
) -> Result<PredictiveDist> {
    let cfg = EvalConfig { backend: Backend::Cholesky, oracle_cap: cap, ..EvalConfig::default() };
    let pcfg = PredictConfig { method: VarianceMethod::Exact, ..PredictConfig::default() };
    crate::predict::predict(design, family, params, spec, &cfg, &pcfg)
}

/// Latent predictive variances from the `Ψ` form
/// `Z_poΣZ_poᵀ + Z_ppΣ_pZ_ppᵀ − Z_poΣZᵀΨ⁻¹ZΣZ_poᵀ` with a dense `n × n`
/// Cholesky of `Ψ`; Gaussian only.
pub fn chol_predict_var_psi_form(
    design: &GroupedDesign,
    params: &ModelParams,
    spec: &PredictionSpec,
    cap: usize,
) -> Result<Vec<f64>> {
    let n = design.n();
    if n > cap {
        return Err(Error::CapExceeded { cap, requested: n });
    }
    let z = &design.z;
    let f = DenseFactor::from_dense(naive_psi(z, params)?)?;
    let sigma: Vec<f64> = params.sigma_inv(z).iter().map(|s| 1.0 / s).collect();
    let mut out = Vec::with_capacity(spec.n_rows());
    let mut col = vec![0.0; z.n_cols()];
    for i in 0..spec.n_rows() {
        col.iter_mut().for_each(|v| *v = 0.0);
        let mut prior = spec.new_level_variance(i, params);
        for &c in spec.seen_levels(i) {
            col[c] += sigma[c];
            prior += sigma[c];
        }
        // v = Z Σ Z_poᵀ e_i
        let v = z.matvec(&col)?;
        let a = f.solve(&v);
        let red: f64 = v.iter().zip(&a).map(|(x, y)| x * y).sum();
        out.push(prior - red);
    }
    Ok(out)
}
