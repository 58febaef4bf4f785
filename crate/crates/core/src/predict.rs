//! Posterior predictive distributions of the latent variable and the
//! response: means, and predictive variances from exact solves, the
//! stochastic diagonal estimator with a preconditioner control variate,
//! two simulation estimators and a Lanczos approximation.
//!
//! With `Z_po` the incidence of prediction rows into training levels and
//! `Z_pp` into unseen levels,
//! `Ω_p = Z_ppΣ_pZ_ppᵀ + Z_po M⁻¹ Z_poᵀ
//!      = Z_poΣZ_poᵀ + Z_ppΣ_pZ_ppᵀ − Z_poΣZᵀΨ⁻¹ZΣZ_poᵀ`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::inference::{Diagnostics, EvalConfig, Evaluator, System};
use crate::krylov::{combine_control_variate, lanczos_partial, CgConfig};
use crate::likelihood::{sigmoid, Family, Likelihood};
use crate::linalg::dot;
use crate::model::{GroupedDesign, ModelParams};
use crate::par::map_indexed;
use crate::precond::Preconditioner;
use crate::probes::{fill_normal, rademacher_vec, stream_rng, Domain};
use crate::quadrature::GaussHermite;
use crate::sparse::{Incidence, NormalPattern, ReStructure};

/// Prediction rows: covariates and the level of every factor, either a
/// training level (global column of `Z`) or a new level.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSpec {
    x: Vec<f64>,
    p: usize,
    n_factors: usize,
    /// Training columns per row, ascending.
    seen: Vec<Vec<usize>>,
    /// `(factor, new level)` per row.
    new: Vec<Vec<(usize, usize)>>,
    new_level_counts: Vec<usize>,
}

impl PredictionSpec {
    pub fn new(
        x: Vec<f64>,
        p: usize,
        z_train: &Incidence,
        seen: Vec<Vec<usize>>,
        new: Vec<Vec<(usize, usize)>>,
        new_level_counts: Vec<usize>,
    ) -> Result<Self> {
        let n_p = seen.len();
        let k = z_train.n_factors();
        if new.len() != n_p {
            return Err(Error::DimensionMismatch { expected: n_p, found: new.len() });
        }
        if x.len() != n_p * p {
            return Err(Error::DimensionMismatch { expected: n_p * p, found: x.len() });
        }
        if new_level_counts.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: new_level_counts.len() });
        }
        let mut seen = seen;
        for (i, (s, nw)) in seen.iter_mut().zip(&new).enumerate() {
            s.sort_unstable();
            let mut covered = vec![false; k];
            for &c in s.iter() {
                if c >= z_train.n_cols() {
                    return Err(Error::InvalidInput(alloc::format!("row {i}: training column {c} out of range")));
                }
                let f = z_train.factor_of(c);
                if core::mem::replace(&mut covered[f], true) {
                    return Err(Error::InvalidInput(alloc::format!("row {i}: factor {f} given twice")));
                }
            }
            for &(f, l) in nw {
                if f >= k || l >= new_level_counts[f] {
                    return Err(Error::InvalidInput(alloc::format!("row {i}: new level ({f}, {l}) out of range")));
                }
                if core::mem::replace(&mut covered[f], true) {
                    return Err(Error::InvalidInput(alloc::format!("row {i}: factor {f} given twice")));
                }
            }
            if let Some(f) = covered.iter().position(|c| !c) {
                return Err(Error::InvalidInput(alloc::format!("row {i}: factor {f} has no level")));
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction covariates"));
        }
        Ok(Self { x, p, n_factors: k, seen, new, new_level_counts })
    }

    /// Maps raw labels (one column per factor) against the training
    /// dictionaries; unseen labels become new levels in first-appearance order.
    pub fn from_labels<S: AsRef<str>>(
        structure: &ReStructure,
        z_train: &Incidence,
        labels: &[Vec<S>],
        x: Vec<f64>,
        p: usize,
    ) -> Result<Self> {
        let k = structure.n_factors();
        if labels.len() != k || z_train.n_factors() != k {
            return Err(Error::DimensionMismatch { expected: k, found: labels.len() });
        }
        let n_p = labels.first().map_or(0, Vec::len);
        let mut seen = vec![Vec::with_capacity(k); n_p];
        let mut new = vec![Vec::new(); n_p];
        let mut counts = vec![0; k];
        for (f, col) in labels.iter().enumerate() {
            if col.len() != n_p {
                return Err(Error::DimensionMismatch { expected: n_p, found: col.len() });
            }
            let offset = z_train.factor_range(f).start;
            let mut fresh: BTreeMap<String, usize> = BTreeMap::new();
            for (i, lab) in col.iter().enumerate() {
                let lab = lab.as_ref();
                match structure.factors[f].get(lab) {
                    Some(l) => seen[i].push(offset + l),
                    None => {
                        let next = fresh.len();
                        let l = *fresh.entry(lab.into()).or_insert(next);
                        new[i].push((f, l));
                    }
                }
            }
            counts[f] = fresh.len();
        }
        Self::new(x, p, z_train, seen, new, counts)
    }

    /// Maps integer level codes (one column per factor) through
    /// `train_level[f][code]`; codes without a training level become new
    /// levels in first-appearance order.
    pub fn from_codes(
        z_train: &Incidence,
        codes: &[Vec<usize>],
        train_level: &[Vec<Option<usize>>],
        x: Vec<f64>,
        p: usize,
    ) -> Result<Self> {
        let k = z_train.n_factors();
        if codes.len() != k || train_level.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: codes.len() });
        }
        let n_p = codes.first().map_or(0, Vec::len);
        let mut seen = vec![Vec::with_capacity(k); n_p];
        let mut new = vec![Vec::new(); n_p];
        let mut counts = vec![0; k];
        for f in 0..k {
            let offset = z_train.factor_range(f).start;
            let mut fresh: BTreeMap<usize, usize> = BTreeMap::new();
            for (i, &c) in codes[f].iter().enumerate() {
                match train_level[f].get(c).copied().flatten() {
                    Some(l) => seen[i].push(offset + l),
                    None => {
                        let next = fresh.len();
                        let l = *fresh.entry(c).or_insert(next);
                        new[i].push((f, l));
                    }
                }
            }
            counts[f] = fresh.len();
        }
        Self::new(x, p, z_train, seen, new, counts)
    }

    pub fn n_rows(&self) -> usize {
        self.seen.len()
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn seen_levels(&self, i: usize) -> &[usize] {
        &self.seen[i]
    }

    pub fn new_levels(&self, i: usize) -> &[(usize, usize)] {
        &self.new[i]
    }

    pub fn new_level_counts(&self) -> &[usize] {
        &self.new_level_counts
    }

    /// `(Z_ppΣ_pZ_ppᵀ)_ii`
    pub fn new_level_variance(&self, i: usize, params: &ModelParams) -> f64 {
        self.new[i].iter().map(|&(f, _)| params.re_variances[f]).sum()
    }

    /// `(Z_ppΣ_pZ_ppᵀ)_ij`
    pub fn new_level_covariance(&self, i: usize, j: usize, params: &ModelParams) -> f64 {
        self.new[i].iter().filter(|e| self.new[j].contains(e)).map(|&(f, _)| params.re_variances[f]).sum()
    }

    /// `X_p β`
    pub fn fixed_effects(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| self.x[i * self.p..(i + 1) * self.p].iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Z_po b`
    pub fn po_apply(&self, b: &[f64]) -> Vec<f64> {
        self.seen.iter().map(|cols| cols.iter().map(|&c| b[c]).sum()).collect()
    }

    /// `Z_poᵀ v`
    pub fn po_t_apply(&self, v: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for (cols, vi) in self.seen.iter().zip(v) {
            for &c in cols {
                out[c] += vi;
            }
        }
        out
    }

    pub fn p(&self) -> usize {
        self.p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMethod {
    /// One solve per prediction row.
    Exact,
    /// Rademacher diagonal estimator with a preconditioner control variate.
    StochasticDiag,
    /// Simulation through `z ~ N(0, M)`.
    SimulationNormal,
    /// Simulation through `Ψ⁻¹`.
    SimulationPsi,
    /// Rank-`k` Lanczos approximation of `M⁻¹`.
    Lanczos,
}

impl VarianceMethod {
    pub fn name(self) -> &'static str {
        match self {
            VarianceMethod::Exact => "exact",
            VarianceMethod::StochasticDiag => "stochastic-diag",
            VarianceMethod::SimulationNormal => "simulation-normal",
            VarianceMethod::SimulationPsi => "simulation-psi",
            VarianceMethod::Lanczos => "lanczos",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Some(VarianceMethod::Exact),
            "stochastic-diag" | "alg1" | "diag" => Some(VarianceMethod::StochasticDiag),
            "simulation-normal" | "alg2" | "sim-normal" => Some(VarianceMethod::SimulationNormal),
            "simulation-psi" | "alg3" | "sim-psi" => Some(VarianceMethod::SimulationPsi),
            "lanczos" => Some(VarianceMethod::Lanczos),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictConfig {
    pub method: VarianceMethod,
    /// Simulation count `s`.
    pub samples: usize,
    pub lanczos_rank: usize,
    pub seed: u64,
    /// Solves inside the stochastic estimators.
    pub cg: CgConfig,
    /// Also estimate the full covariance (simulation methods and exact).
    pub full_cov: bool,
    pub control_variate: bool,
    pub quadrature_points: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            method: VarianceMethod::StochasticDiag,
            samples: 1000,
            lanczos_rank: 50,
            seed: 1,
            cg: CgConfig { tol: 1e-3, max_iter: 1000 },
            full_cov: false,
            control_variate: true,
            quadrature_points: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSummary {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDist {
    /// Latent means `ω_p`.
    pub mean: Vec<f64>,
    /// Random-effect part `Z_po b̄` of the latent means.
    pub re_mean: Vec<f64>,
    pub var: Vec<f64>,
    pub method: VarianceMethod,
    pub samples: usize,
    /// Row-major `n_p × n_p`, when requested and supported.
    pub cov: Option<Vec<f64>>,
    /// Negative variance estimates set to zero.
    pub clamped: usize,
    pub cg_iterations: usize,
    pub cg_not_converged: usize,
    pub response: Option<ResponseSummary>,
}

/// Variance estimates before assembly into a [`PredictiveDist`].
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub var: Vec<f64>,
    pub cov: Option<Vec<f64>>,
    pub clamped: usize,
    pub cg_iterations: usize,
    pub cg_not_converged: usize,
}

/// Fitted model frozen for prediction: the mode (or Gaussian posterior mean
/// of `b`), `W` and the system in `M`.
pub struct Predictor<'a> {
    design: &'a GroupedDesign,
    params: &'a ModelParams,
    spec: &'a PredictionSpec,
    likelihood: Likelihood,
    sys: System,
    w: Vec<f64>,
    sigma_inv: Vec<f64>,
    b_mean: Vec<f64>,
    eval: EvalConfig,
}

impl<'a> Predictor<'a> {
    pub fn new(
        design: &'a GroupedDesign,
        family: Family,
        params: &'a ModelParams,
        spec: &'a PredictionSpec,
        eval: &EvalConfig,
    ) -> Result<Self> {
        params.validate(design, family)?;
        if spec.n_factors() != design.n_factors() {
            return Err(Error::DimensionMismatch { expected: design.n_factors(), found: spec.n_factors() });
        }
        if spec.p() != design.p {
            return Err(Error::DimensionMismatch { expected: design.p, found: spec.p() });
        }
        let likelihood = params.likelihood(family)?;
        let sigma_inv = params.sigma_inv(&design.z);
        let pattern = NormalPattern::new(&design.z);
        let mut diag = Diagnostics::default();
        let (w, sys, b_mean) = match likelihood {
            Likelihood::Gaussian { sigma2 } if !eval.force_laplace => {
                let w = vec![1.0 / sigma2; design.n()];
                let sys = System::build(eval, &pattern, &w, &sigma_inv, &mut diag)?;
                let b = gaussian_posterior_mean_psi(design, params, &sys, eval, &mut diag)?;
                (w, sys, b)
            }
            _ => {
                let mut ev = Evaluator::new(design, family, *eval)?;
                let mode = ev.find_mode(params)?;
                let w = mode.derivs.w();
                let sys = System::build(eval, &pattern, &w, &sigma_inv, &mut diag)?;
                (w, sys, mode.b)
            }
        };
        Ok(Self { design, params, spec, likelihood, sys, w, sigma_inv, b_mean, eval: *eval })
    }

    /// Posterior mean of `b` used for the latent predictive mean.
    pub fn posterior_mean(&self) -> &[f64] {
        &self.b_mean
    }

    /// `ω_p = X_pβ + Z_po b̄`
    pub fn latent_mean(&self) -> Vec<f64> {
        let mut out = self.spec.fixed_effects(&self.params.beta);
        for (o, v) in out.iter_mut().zip(self.spec.po_apply(&self.b_mean)) {
            *o += v;
        }
        out
    }

    /// Gaussian latent mean in the mode form `X_pβ + Z_po M⁻¹ZᵀW(y − Xβ)`.
    pub fn latent_mean_mode_form(&self) -> Result<Vec<f64>> {
        let d = self.design;
        let fx = d.fixed_effects(&self.params.beta);
        let wr: Vec<f64> = d.y.iter().zip(&fx).zip(&self.w).map(|((y, f), w)| w * (y - f)).collect();
        let rhs = d.z.t_matvec(&wr)?;
        let b = self.sys.solve(&rhs, &self.eval, &mut Diagnostics::default())?;
        let mut out = self.spec.fixed_effects(&self.params.beta);
        for (o, v) in out.iter_mut().zip(self.spec.po_apply(&b)) {
            *o += v;
        }
        Ok(out)
    }

    pub fn variances(&self, cfg: &PredictConfig) -> Result<VarianceEstimate> {
        let mut est = match cfg.method {
            VarianceMethod::Exact => self.var_exact(cfg.full_cov)?,
            VarianceMethod::StochasticDiag => self.var_stochastic_diag(cfg)?,
            VarianceMethod::SimulationNormal => self.var_sim_normal(cfg)?,
            VarianceMethod::SimulationPsi => self.var_sim_psi(cfg)?,
            VarianceMethod::Lanczos => self.var_lanczos(cfg.lanczos_rank, cfg.seed)?,
        };
        for v in est.var.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                est.clamped += 1;
            }
        }
        Ok(est)
    }

    pub fn predict(&self, cfg: &PredictConfig) -> Result<PredictiveDist> {
        let est = self.variances(cfg)?;
        let mut dist = PredictiveDist {
            mean: self.latent_mean(),
            re_mean: self.spec.po_apply(&self.b_mean),
            var: est.var,
            method: cfg.method,
            samples: match cfg.method {
                VarianceMethod::Exact | VarianceMethod::Lanczos => 0,
                _ => cfg.samples,
            },
            cov: est.cov,
            clamped: est.clamped,
            cg_iterations: est.cg_iterations,
            cg_not_converged: est.cg_not_converged,
            response: None,
        };
        dist.response = Some(predict_response(&dist, &self.likelihood, cfg.quadrature_points)?);
        Ok(dist)
    }

    fn m_dim(&self) -> usize {
        self.design.z.n_cols()
    }

    fn prior_diag(&self, i: usize) -> f64 {
        self.spec.new_level_variance(i, self.params)
    }

    fn rel_cfg(&self, rhs: &[f64]) -> CgConfig {
        let nr = dot(rhs, rhs).sqrt();
        CgConfig { tol: self.eval.solve_rel_tol * nr, max_iter: self.eval.cg.max_iter }
    }

    /// One solve of `M` per prediction row with training levels.
    pub fn var_exact(&self, full_cov: bool) -> Result<VarianceEstimate> {
        let n_p = self.spec.n_rows();
        let m = self.m_dim();
        let cols: Vec<Result<(Vec<f64>, usize, bool)>> = map_indexed(n_p, |i| {
            let mut e = vec![0.0; m];
            for &c in self.spec.seen_levels(i) {
                e[c] += 1.0;
            }
            if self.spec.seen_levels(i).is_empty() {
                return Ok((e, 0, true));
            }
            let cfg = self.rel_cfg(&e);
            self.sys.solve_cg(&e, cfg)
        });
        let mut sols = Vec::with_capacity(n_p);
        let mut iters = 0;
        let mut bad = 0;
        for c in cols {
            let (x, it, ok) = c?;
            iters += it;
            bad += usize::from(!ok);
            sols.push(x);
        }
        let var: Vec<f64> = (0..n_p)
            .map(|i| self.prior_diag(i) + self.spec.seen_levels(i).iter().map(|&c| sols[i][c]).sum::<f64>())
            .collect();
        let cov = if full_cov {
            let mut out = vec![0.0; n_p * n_p];
            for i in 0..n_p {
                for j in 0..n_p {
                    let po: f64 = self.spec.seen_levels(j).iter().map(|&c| sols[i][c]).sum();
                    out[i * n_p + j] = po + self.spec.new_level_covariance(i, j, self.params);
                }
            }
            Some(out)
        } else {
            None
        };
        Ok(VarianceEstimate { var, cov, clamped: 0, cg_iterations: iters, cg_not_converged: bad })
    }

    fn control_preconditioner(&self) -> Result<Preconditioner> {
        match self.sys.precond() {
            Some(p) => Ok(p.clone()),
            None => Preconditioner::build(self.eval.precond, self.sys.matrix(), self.eval.seed),
        }
    }

    /// `diag(Z_po P⁻¹ Z_poᵀ)` through the triangular factor of `P` where one
    /// exists, otherwise through `P⁻¹`. Rows sharing training levels share
    /// the computation.
    fn diag_po_pinv_po(&self, p: &Preconditioner) -> Vec<f64> {
        let m = self.m_dim();
        let n_p = self.spec.n_rows();
        let mut unique: BTreeMap<&[usize], usize> = BTreeMap::new();
        let mut keys: Vec<&[usize]> = Vec::new();
        let row_key: Vec<usize> = (0..n_p)
            .map(|i| {
                let s = self.spec.seen_levels(i);
                *unique.entry(s).or_insert_with(|| {
                    keys.push(s);
                    keys.len() - 1
                })
            })
            .collect();
        let values: Vec<f64> = map_indexed(keys.len(), |u| {
            let cols = keys[u];
            if cols.is_empty() {
                return 0.0;
            }
            let mut e = vec![0.0; m];
            for &c in cols {
                e[c] += 1.0;
            }
            let mut f = e.clone();
            if p.factor_solve_in_place(&mut f).is_ok() {
                dot(&f, &f)
            } else {
                let x = p.solve(&e);
                cols.iter().map(|&c| x[c]).sum()
            }
        });
        row_key.iter().map(|&u| values[u]).collect()
    }

    /// Rademacher probes `z₁ ∈ R^{n_p}`, `h = z₁ ⊙ Z_po M⁻¹ Z_poᵀ z₁`,
    /// `r = z₁ ⊙ Z_po P⁻¹ Z_poᵀ z₁`, combined with per-row weights.
    pub fn var_stochastic_diag(&self, cfg: &PredictConfig) -> Result<VarianceEstimate> {
        if cfg.samples < 2 {
            return Err(Error::InvalidInput("the stochastic diagonal estimator needs at least two samples".into()));
        }
        let n_p = self.spec.n_rows();
        let m = self.m_dim();
        let p = self.control_preconditioner()?;
        let runs: Vec<Result<(Vec<f64>, Vec<f64>, usize, bool)>> = map_indexed(cfg.samples, |i| {
            let mut rng = stream_rng(cfg.seed, Domain::PredictDiag, i as u64);
            let z1 = rademacher_vec(&mut rng, n_p);
            let v = self.spec.po_t_apply(&z1, m);
            let (x, it, ok) = self.sys.solve_cg(&v, cfg.cg)?;
            let z2 = self.spec.po_apply(&x);
            let h: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a * b).collect();
            let r = if cfg.control_variate {
                let z3 = self.spec.po_apply(&p.solve(&v));
                z1.iter().zip(&z3).map(|(a, b)| a * b).collect()
            } else {
                Vec::new()
            };
            Ok((h, r, it, ok))
        });
        let mut hs = Vec::with_capacity(cfg.samples);
        let mut rs = Vec::with_capacity(cfg.samples);
        let mut iters = 0;
        let mut bad = 0;
        for run in runs {
            let (h, r, it, ok) = run?;
            hs.push(h);
            rs.push(r);
            iters += it;
            bad += usize::from(!ok);
        }
        let term = if cfg.control_variate {
            let det = self.diag_po_pinv_po(&p);
            combine_control_variate(&hs, Some((&rs, &det)))
        } else {
            combine_control_variate(&hs, None)
        };
        let var = (0..n_p)
            .map(|i| {
                let po = if self.spec.seen_levels(i).is_empty() { 0.0 } else { term.estimate[i] };
                self.prior_diag(i) + po
            })
            .collect();
        Ok(VarianceEstimate { var, cov: None, clamped: 0, cg_iterations: iters, cg_not_converged: bad })
    }

    /// `z₃ = Σ^{-1/2}z₁ + ZᵀW^{1/2}z₂ ~ N(0, M)`, `z₄ = Z_po M⁻¹ z₃`.
    pub fn var_sim_normal(&self, cfg: &PredictConfig) -> Result<VarianceEstimate> {
        let n = self.design.n();
        let m = self.m_dim();
        let z = &self.design.z;
        let sqrt_w: Vec<f64> = self.w.iter().map(|v| v.sqrt()).collect();
        let sqrt_sinv: Vec<f64> = self.sigma_inv.iter().map(|v| v.sqrt()).collect();
        let runs: Vec<Result<(Vec<f64>, usize, bool)>> = map_indexed(cfg.samples, |i| {
            let mut rng = stream_rng(cfg.seed, Domain::PredictSim, i as u64);
            let mut z1 = vec![0.0; m];
            let mut z2 = vec![0.0; n];
            fill_normal(&mut rng, &mut z1);
            fill_normal(&mut rng, &mut z2);
            let wz2: Vec<f64> = z2.iter().zip(&sqrt_w).map(|(a, b)| a * b).collect();
            let mut z3 = z.t_matvec(&wz2)?;
            for ((o, a), s) in z3.iter_mut().zip(&z1).zip(&sqrt_sinv) {
                *o += a * s;
            }
            let (x, it, ok) = self.sys.solve_cg(&z3, cfg.cg)?;
            Ok((self.spec.po_apply(&x), it, ok))
        });
        self.assemble_simulation(runs, cfg, 1.0)
    }

    /// `z₃ = ZΣ^{1/2}z₁ + W^{-1/2}z₂ ~ N(0, Ψ)`, `z₄ = Z_poΣZᵀΨ⁻¹z₃`.
    pub fn var_sim_psi(&self, cfg: &PredictConfig) -> Result<VarianceEstimate> {
        if self.w.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Unsupported("simulation through Ψ needs a positive W".into()));
        }
        let n = self.design.n();
        let m = self.m_dim();
        let z = &self.design.z;
        let sd: Vec<f64> = self.sigma_inv.iter().map(|v| 1.0 / v.sqrt()).collect();
        let runs: Vec<Result<(Vec<f64>, usize, bool)>> = map_indexed(cfg.samples, |i| {
            let mut rng = stream_rng(cfg.seed, Domain::PredictSim, i as u64);
            let mut z1 = vec![0.0; m];
            let mut z2 = vec![0.0; n];
            fill_normal(&mut rng, &mut z1);
            fill_normal(&mut rng, &mut z2);
            let s1: Vec<f64> = z1.iter().zip(&sd).map(|(a, b)| a * b).collect();
            let mut z3 = z.matvec(&s1)?;
            for ((o, e), w) in z3.iter_mut().zip(&z2).zip(&self.w) {
                *o += e / w.sqrt();
            }
            // Ψ⁻¹x = Wx − WZM⁻¹ZᵀWx
            let wx: Vec<f64> = z3.iter().zip(&self.w).map(|(a, b)| a * b).collect();
            let (sol, it, ok) = self.sys.solve_cg(&z.t_matvec(&wx)?, cfg.cg)?;
            let zs = z.matvec(&sol)?;
            let psi: Vec<f64> = wx.iter().zip(&zs).zip(&self.w).map(|((a, b), w)| a - w * b).collect();
            let sz: Vec<f64> = z.t_matvec(&psi)?.iter().zip(&sd).map(|(a, s)| a * s * s).collect();
            Ok((self.spec.po_apply(&sz), it, ok))
        });
        self.assemble_simulation(runs, cfg, -1.0)
    }

    /// Prior part plus `sign · mean(z₄z₄ᵀ)`. The prior part includes
    /// `Z_poΣZ_poᵀ` when `sign < 0`.
    fn assemble_simulation(
        &self,
        runs: Vec<Result<(Vec<f64>, usize, bool)>>,
        cfg: &PredictConfig,
        sign: f64,
    ) -> Result<VarianceEstimate> {
        let n_p = self.spec.n_rows();
        let s = runs.len().max(1) as f64;
        let sigma: Vec<f64> = self.sigma_inv.iter().map(|v| 1.0 / v).collect();
        let mut acc = vec![0.0; n_p];
        let mut cov = if cfg.full_cov { Some(vec![0.0; n_p * n_p]) } else { None };
        let mut iters = 0;
        let mut bad = 0;
        for run in runs {
            let (z4, it, ok) = run?;
            iters += it;
            bad += usize::from(!ok);
            for (a, v) in acc.iter_mut().zip(&z4) {
                *a += v * v;
            }
            if let Some(c) = cov.as_mut() {
                for i in 0..n_p {
                    for j in 0..n_p {
                        c[i * n_p + j] += z4[i] * z4[j];
                    }
                }
            }
        }
        let with_po = sign < 0.0;
        let prior = |i: usize, j: usize| -> f64 {
            let mut v = self.spec.new_level_covariance(i, j, self.params);
            if with_po {
                let (a, b) = (self.spec.seen_levels(i), self.spec.seen_levels(j));
                v += a.iter().filter(|c| b.contains(c)).map(|&c| sigma[c]).sum::<f64>();
            }
            v
        };
        let var = (0..n_p).map(|i| prior(i, i) + sign * acc[i] / s).collect();
        if let Some(c) = cov.as_mut() {
            for i in 0..n_p {
                for j in 0..n_p {
                    c[i * n_p + j] = prior(i, j) + sign * c[i * n_p + j] / s;
                }
            }
        }
        Ok(VarianceEstimate { var, cov, clamped: 0, cg_iterations: iters, cg_not_converged: bad })
    }

    /// `diag(Z_poΣZ_poᵀ) + diag(Z_ppΣ_pZ_ppᵀ) − diag(UᵀGU) + diag(UᵀGQT⁻¹QᵀGU)`
    /// with `U = ΣZ_poᵀ`, `G = ZᵀWZ` and a rank-`k` Lanczos basis `Q` of `M`
    /// started from the normalized column average of `GU`.
    pub fn var_lanczos(&self, k: usize, _seed: u64) -> Result<VarianceEstimate> {
        if k == 0 {
            return Err(Error::InvalidInput("Lanczos rank must be at least one".into()));
        }
        let n_p = self.spec.n_rows();
        let m = self.m_dim();
        let mm = self.sys.matrix();
        let sigma: Vec<f64> = self.sigma_inv.iter().map(|v| 1.0 / v).collect();
        let ones = vec![1.0 / n_p.max(1) as f64; n_p];
        let u_avg: Vec<f64> = self.spec.po_t_apply(&ones, m).iter().zip(&sigma).map(|(a, s)| a * s).collect();
        let mut q0 = vec![0.0; m];
        mm.ztwz_apply(&u_avg, &mut q0);
        let prior_only: Vec<f64> = (0..n_p)
            .map(|i| self.prior_diag(i) + self.spec.seen_levels(i).iter().map(|&c| sigma[c]).sum::<f64>())
            .collect();
        if q0.iter().all(|v| *v == 0.0) {
            return Ok(VarianceEstimate { var: prior_only, cov: None, clamped: 0, cg_iterations: 0, cg_not_converged: 0 });
        }
        let lz = lanczos_partial(mm, &q0, k)?;
        let r = lz.rank();
        // GQ, column-major m × r.
        let mut gq = vec![0.0; m * r];
        for j in 0..r {
            mm.ztwz_apply(lz.basis_column(j), &mut gq[j * m..(j + 1) * m]);
        }
        let var = map_indexed(n_p, |i| {
            let cols = self.spec.seen_levels(i);
            let ugu: f64 = cols
                .iter()
                .flat_map(|&a| cols.iter().map(move |&b| (a, b)))
                .map(|(a, b)| sigma[a] * sigma[b] * mm.ztwz_get(a, b))
                .sum();
            let y: Vec<f64> = (0..r).map(|j| cols.iter().map(|&c| sigma[c] * gq[j * m + c]).sum()).collect();
            let ty = lz.tridiag.solve(&y).unwrap_or_else(|_| vec![0.0; r]);
            prior_only[i] - ugu + dot(&y, &ty)
        });
        Ok(VarianceEstimate { var, cov: None, clamped: 0, cg_iterations: r, cg_not_converged: 0 })
    }
}

/// `ΣZᵀΨ⁻¹(y − Xβ)` with `Ψ⁻¹` through Woodbury.
fn gaussian_posterior_mean_psi(
    design: &GroupedDesign,
    params: &ModelParams,
    sys: &System,
    eval: &EvalConfig,
    diag: &mut Diagnostics,
) -> Result<Vec<f64>> {
    let s2 = params.error_variance.expect("validated");
    let w = 1.0 / s2;
    let fx = design.fixed_effects(&params.beta);
    let r: Vec<f64> = design.y.iter().zip(&fx).map(|(a, b)| a - b).collect();
    let rhs: Vec<f64> = design.z.t_matvec(&r)?.iter().map(|v| v * w).collect();
    let x = sys.solve(&rhs, eval, diag)?;
    let zx = design.z.matvec(&x)?;
    let alpha: Vec<f64> = r.iter().zip(&zx).map(|(ri, zi)| w * (ri - zi)).collect();
    let sinv = params.sigma_inv(&design.z);
    Ok(design.z.t_matvec(&alpha)?.iter().zip(&sinv).map(|(a, s)| a / s).collect())
}

/// Response-scale summaries: Gaussian adds the error variance; Bernoulli
/// integrates the inverse link against `N(ω_i, var_i)` by Gauss–Hermite.
pub fn predict_response(dist: &PredictiveDist, lik: &Likelihood, points: usize) -> Result<ResponseSummary> {
    match *lik {
        Likelihood::Gaussian { sigma2 } => {
            Ok(ResponseSummary { mean: dist.mean.clone(), var: dist.var.iter().map(|v| v + sigma2).collect() })
        }
        Likelihood::BernoulliLogit => {
            let gh = GaussHermite::new(points)?;
            let mean: Vec<f64> =
                dist.mean.iter().zip(&dist.var).map(|(m, v)| gh.expect(*m, *v, sigmoid)).collect();
            let var = mean.iter().map(|p| p * (1.0 - p)).collect();
            Ok(ResponseSummary { mean, var })
        }
    }
}

/// Latent and response predictive distribution in one call.
pub fn predict(
    design: &GroupedDesign,
    family: Family,
    params: &ModelParams,
    spec: &PredictionSpec,
    eval: &EvalConfig,
    cfg: &PredictConfig,
) -> Result<PredictiveDist> {
    Predictor::new(design, family, params, spec, eval)?.predict(cfg)
}
