//! Marginal likelihood maximization over `(log σ_k², log σ², β)` with frozen
//! probes, and asymptotic standard errors from the Fisher information.
//!
//! The default search direction is limited-memory BFGS; with
//! `fisher_scoring` on a Gaussian model the direction is the expected
//! information step, which is block diagonal in the variance parameters and
//! `β`. Every step is accepted by Armijo backtracking, so the recorded
//! objective never increases.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::inference::{Backend, Diagnostics, EvalConfig, Evaluator, NllBundle};
use crate::krylov::{psi_inv_apply, ste_fisher_information, CgConfig};
use crate::likelihood::Family;
use crate::linalg::dot;
use crate::model::{GroupedDesign, ModelParams};
use crate::oracle::{chol_fisher, DenseFactor};
use crate::precond::Preconditioner;
use crate::probes::{Domain, ProbeKind, ProbeSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub max_iter: usize,
    /// Stop when `‖∇‖∞` falls to this value.
    pub grad_tol: f64,
    /// Stop when `|Δnll| ≤ rel_tol · max(|nll|, 1)`.
    pub rel_tol: f64,
    pub max_halvings: usize,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    pub memory: usize,
    pub fisher_scoring: bool,
    /// Largest coordinate change of a steepest-descent step.
    pub max_step: f64,
    pub std_errors: bool,
    /// Probes for the stochastic Fisher information on the Krylov backend.
    pub fisher_probes: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            grad_tol: 1e-5,
            rel_tol: 1e-8,
            max_halvings: 30,
            armijo: 1e-4,
            memory: 10,
            fisher_scoring: false,
            max_step: 1.0,
            std_errors: true,
            fisher_probes: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    RelativeChange,
    MaxIterations,
    /// No step along steepest descent decreased the objective after the
    /// full number of halvings.
    LineSearchStalled,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::GradientTolerance => "gradient_tolerance",
            StopReason::RelativeChange => "relative_change",
            StopReason::MaxIterations => "max_iterations",
            StopReason::LineSearchStalled => "line_search_stalled",
        }
    }

    pub fn converged(self) -> bool {
        !matches!(self, StopReason::MaxIterations)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ModelParams,
    /// Objective after every accepted step, starting at the initial value.
    pub nll_trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
    pub grad_inf_norm: f64,
    /// Gaussian only: row-major Fisher information in `(σ_1², …, σ_K², σ²)`.
    pub fisher: Option<Vec<f64>>,
    pub std_errors: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
    pub backend: Backend,
    pub probe_seed: u64,
}

impl FitResult {
    pub fn nll(&self) -> f64 {
        *self.nll_trace.last().expect("trace holds the initial value")
    }
}

/// Minimizes the negative log-marginal likelihood from `init`.
pub fn fit(
    design: &GroupedDesign,
    family: Family,
    init: &ModelParams,
    eval: EvalConfig,
    cfg: &OptimConfig,
) -> Result<FitResult> {
    init.validate(design, family)?;
    let fisher_scoring = cfg.fisher_scoring && family == Family::Gaussian && !eval.force_laplace;
    let mut ev = Evaluator::new(design, family, eval)?;
    let mut x = init.to_unconstrained();
    let mut params = init.clone();
    let mut cur = ev.evaluate(&params, true)?;
    if !cur.nll.is_finite() {
        return Err(Error::NonFinite("objective at the initial values"));
    }
    let mut g = cur.gradient();
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient at the initial values"));
    }
    let mut evaluations = 1;
    let mut trace = vec![cur.nll];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let reason = loop {
        if inf_norm(&g) <= cfg.grad_tol {
            break StopReason::GradientTolerance;
        }
        if iterations >= cfg.max_iter {
            break StopReason::MaxIterations;
        }
        let mut dir = if fisher_scoring {
            fisher_direction(design, &params, &ev, &g, cfg).unwrap_or_else(|_| steepest(&g, cfg.max_step))
        } else {
            lbfgs_direction(&g, &mem, cfg.max_step)
        };
        if dot(&g, &dir) >= 0.0 {
            mem.clear();
            dir = steepest(&g, cfg.max_step);
        }
        let mut accepted = line_search(&mut ev, &x, &params, &cur, &g, &dir, cfg, &mut evaluations);
        if accepted.is_none() && (!mem.is_empty() || fisher_scoring) {
            mem.clear();
            dir = steepest(&g, cfg.max_step);
            accepted = line_search(&mut ev, &x, &params, &cur, &g, &dir, cfg, &mut evaluations);
        }
        let Some((x_new, p_new, b_new)) = accepted else {
            if iterations == 0 {
                return Err(Error::LineSearchFailed { halvings: cfg.max_halvings });
            }
            break StopReason::LineSearchStalled;
        };
        iterations += 1;
        let g_new = b_new.gradient();
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if mem.len() == cfg.memory.max(1) {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let change = (cur.nll - b_new.nll).abs();
        let scale = cur.nll.abs().max(1.0);
        trace.push(b_new.nll);
        x = x_new;
        params = p_new;
        cur = b_new;
        g = g_new;
        if change <= cfg.rel_tol * scale {
            break if inf_norm(&g) <= cfg.grad_tol { StopReason::GradientTolerance } else { StopReason::RelativeChange };
        }
    };
    let (fisher, std_errors) = if cfg.std_errors && family == Family::Gaussian {
        match fisher_information(design, &params, &eval, cfg.fisher_probes) {
            Ok(f) => {
                let se = std_errors_from_fisher(&f, params.re_variances.len() + 1).ok();
                (Some(f), se)
            }
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };
    Ok(FitResult {
        params,
        nll_trace: trace,
        iterations,
        evaluations,
        reason,
        grad_inf_norm: inf_norm(&g),
        fisher,
        std_errors,
        diagnostics: cur.diagnostics,
        backend: eval.backend,
        probe_seed: eval.seed,
    })
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn steepest(g: &[f64], max_step: f64) -> Vec<f64> {
    let s = (max_step / inf_norm(g)).min(1.0);
    g.iter().map(|v| -s * v).collect()
}

fn lbfgs_direction(g: &[f64], mem: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, max_step: f64) -> Vec<f64> {
    let Some((s_last, y_last, _)) = mem.back() else {
        return steepest(g, max_step);
    };
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; mem.len()];
    for (i, (s, y, rho)) in mem.iter().enumerate().rev() {
        alpha[i] = rho * dot(s, &q);
        for (qj, yj) in q.iter_mut().zip(y) {
            *qj -= alpha[i] * yj;
        }
    }
    let gamma = dot(s_last, y_last) / dot(y_last, y_last);
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for (i, (s, y, rho)) in mem.iter().enumerate() {
        let beta = rho * dot(y, &q);
        for (qj, sj) in q.iter_mut().zip(s) {
            *qj += (alpha[i] - beta) * sj;
        }
    }
    q.iter().map(|v| -v).collect()
}

#[allow(clippy::too_many_arguments)]
fn line_search(
    ev: &mut Evaluator<'_>,
    x: &[f64],
    params: &ModelParams,
    cur: &NllBundle,
    g: &[f64],
    dir: &[f64],
    cfg: &OptimConfig,
    evaluations: &mut usize,
) -> Option<(Vec<f64>, ModelParams, NllBundle)> {
    let slope = dot(g, dir);
    let mut step = 1.0;
    for _ in 0..=cfg.max_halvings {
        let x_new: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + step * d).collect();
        let p_new = params.from_unconstrained(&x_new);
        *evaluations += 1;
        if let Ok(b) = ev.evaluate(&p_new, true) {
            if b.nll.is_finite()
                && b.gradient().iter().all(|v| v.is_finite())
                && b.nll <= cur.nll + cfg.armijo * step * slope
            {
                return Some((x_new, p_new, b));
            }
        }
        step *= 0.5;
    }
    None
}

/// Expected-information step: `θ` block from the Fisher information in
/// log-variances, `β` block from `XᵀΨ⁻¹X`.
fn fisher_direction(
    design: &GroupedDesign,
    params: &ModelParams,
    ev: &Evaluator<'_>,
    g: &[f64],
    cfg: &OptimConfig,
) -> Result<Vec<f64>> {
    let q = params.re_variances.len() + 1;
    let f_nat = fisher_information(design, params, ev.config(), cfg.fisher_probes)?;
    let mut theta: Vec<f64> = params.re_variances.clone();
    theta.push(params.error_variance.expect("gaussian"));
    let f_log = DMatrix::from_fn(q, q, |i, j| theta[i] * f_nat[i * q + j] * theta[j]);
    let chol = nalgebra::Cholesky::new(f_log).ok_or(Error::NotPositiveDefinite { index: 0, pivot: f64::NAN })?;
    let d_theta = chol.solve(&nalgebra::DVector::from_column_slice(&g[..q]));
    let xtpx = xt_psi_inv_x(design, params, ev.config())?;
    let p = design.p;
    let chol_b = nalgebra::Cholesky::new(DMatrix::from_row_slice(p, p, &xtpx))
        .ok_or(Error::NotPositiveDefinite { index: 0, pivot: f64::NAN })?;
    let d_beta = chol_b.solve(&nalgebra::DVector::from_column_slice(&g[q..]));
    Ok(d_theta.iter().chain(d_beta.iter()).map(|v| -v).collect())
}

/// `XᵀΨ⁻¹X`, row-major `p × p`.
fn xt_psi_inv_x(design: &GroupedDesign, params: &ModelParams, eval: &EvalConfig) -> Result<Vec<f64>> {
    let z = &design.z;
    let n = design.n();
    let p = design.p;
    let w = vec![1.0 / params.error_variance.expect("gaussian"); n];
    let sinv = params.sigma_inv(z);
    let pattern = crate::sparse::NormalPattern::new(z);
    let m = pattern.assemble(&w, &sinv)?;
    let mut out = vec![0.0; p * p];
    let dense = match eval.backend {
        Backend::Cholesky => Some(DenseFactor::from_normal(&m, eval.oracle_cap)?),
        Backend::Krylov => None,
    };
    let pre = match eval.backend {
        Backend::Krylov => Some(Preconditioner::build(eval.precond, &m, eval.seed).or_else(|e| match e {
            Error::ZicBreakdown { .. } => Preconditioner::build(crate::precond::PrecondKind::Ssor, &m, eval.seed),
            e => Err(e),
        })?),
        Backend::Cholesky => None,
    };
    for j in 0..p {
        let col: Vec<f64> = (0..n).map(|i| design.x_row(i)[j]).collect();
        let v = match (&dense, &pre) {
            (Some(f), _) => {
                let wx: Vec<f64> = col.iter().zip(&w).map(|(a, b)| a * b).collect();
                let s = f.solve(&z.t_matvec(&wx)?);
                let zs = z.matvec(&s)?;
                wx.iter().zip(&zs).zip(&w).map(|((a, b), wi)| a - wi * b).collect()
            }
            (None, Some(pc)) => {
                let tol = eval.solve_rel_tol * dot(&col, &col).sqrt() * w[0];
                psi_inv_apply(z, &m, pc, &w, &col, CgConfig { tol, max_iter: eval.cg.max_iter })?.0
            }
            _ => unreachable!("one backend is always built"),
        };
        let xv = design.xt_apply(&v);
        for i in 0..p {
            out[i * p + j] = xv[i];
        }
    }
    for i in 0..p {
        for j in 0..i {
            let a = 0.5 * (out[i * p + j] + out[j * p + i]);
            out[i * p + j] = a;
            out[j * p + i] = a;
        }
    }
    Ok(out)
}

/// Fisher information of the Gaussian model in `(σ_1², …, σ_K², σ²)`:
/// exact on the Cholesky backend, stochastic on the Krylov backend.
pub fn fisher_information(
    design: &GroupedDesign,
    params: &ModelParams,
    eval: &EvalConfig,
    probes: usize,
) -> Result<Vec<f64>> {
    params.validate(design, Family::Gaussian)?;
    match eval.backend {
        Backend::Cholesky => chol_fisher(design, params, eval.oracle_cap),
        Backend::Krylov => {
            let z = &design.z;
            let w = vec![1.0 / params.error_variance.expect("validated"); design.n()];
            let sinv = params.sigma_inv(z);
            let m = crate::sparse::NormalPattern::new(z).assemble(&w, &sinv)?;
            let pc = Preconditioner::build(eval.precond, &m, eval.seed).or_else(|e| match e {
                Error::ZicBreakdown { .. } => Preconditioner::build(crate::precond::PrecondKind::Ssor, &m, eval.seed),
                e => Err(e),
            })?;
            let set = ProbeSet::new(probes.max(1), ProbeKind::GaussianI, eval.seed, Domain::Fisher);
            Ok(ste_fisher_information(z, &m, &pc, &w, &set, eval.cg, true)?.matrix)
        }
    }
}

/// Smallest accepted eigenvalue ratio of a Fisher matrix.
const SINGULAR_RCOND: f64 = 1e-12;

/// Square roots of the diagonal of the inverse of a row-major `q × q`
/// Fisher information.
pub fn std_errors_from_fisher(fisher: &[f64], q: usize) -> Result<Vec<f64>> {
    if fisher.len() != q * q {
        return Err(Error::DimensionMismatch { expected: q * q, found: fisher.len() });
    }
    let f = DMatrix::from_row_slice(q, q, fisher);
    let f = (&f + f.transpose()) * 0.5;
    // Rounding can let an exactly singular matrix through the factorization.
    let ev = nalgebra::SymmetricEigen::new(f.clone()).eigenvalues;
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
    if !(lo > SINGULAR_RCOND * hi) {
        return Err(Error::NotPositiveDefinite { index: 0, pivot: lo });
    }
    let inv = nalgebra::Cholesky::new(f)
        .ok_or(Error::NotPositiveDefinite { index: 0, pivot: f64::NAN })?
        .inverse();
    Ok((0..q).map(|i| inv[(i, i)].sqrt()).collect())
}

/// Standard errors of `(σ_1², …, σ_K², σ²)` for a Gaussian fit.
pub fn std_errors(fit: &FitResult) -> Result<Vec<f64>> {
    let f = fit.fisher.as_ref().ok_or_else(|| Error::Unsupported("no Fisher information on this fit".into()))?;
    std_errors_from_fisher(f, fit.params.re_variances.len() + 1)
}
