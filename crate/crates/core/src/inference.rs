//! Negative log-marginal likelihood and gradients for the Gaussian model
//! (Woodbury form) and for non-Gaussian models (Laplace approximation with
//! Newton mode finding), on a Krylov or a dense Cholesky backend.
//!
//! Gradients are taken with respect to `log σ_k²`, `log σ²` and `β`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::krylov::{
    pcg_solve, ste_logdet_grad_mode, ste_logdet_grad_theta, ste_trace_ztwz, slq_logdet, CgConfig, SlqEstimate,
};
use crate::likelihood::{DerivStack, Family, Likelihood};
use crate::linalg::{dot, norm2};
use crate::model::{GroupedDesign, ModelParams};
use crate::oracle::{DenseFactor, DEFAULT_CAP};
use crate::precond::{PrecondKind, Preconditioner};
use crate::probes::{Domain, ProbeKind, ProbeSet};
use crate::sparse::{NormalMatrix, NormalPattern};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Krylov,
    Cholesky,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Krylov => "krylov",
            Backend::Cholesky => "cholesky",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "krylov" | "iterative" => Some(Backend::Krylov),
            "cholesky" | "chol" | "oracle" => Some(Backend::Cholesky),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub backend: Backend,
    pub precond: PrecondKind,
    /// Probe count `t` for log-determinants and trace estimates.
    pub num_probes: usize,
    pub seed: u64,
    /// Probe solves (absolute residual tolerance).
    pub cg: CgConfig,
    /// Newton, quadratic-form and implicit-gradient solves, relative to the
    /// right-hand side norm.
    pub solve_rel_tol: f64,
    /// Relative change of the inner objective that ends Newton iterations.
    pub mode_tol: f64,
    pub max_newton: usize,
    pub oracle_cap: usize,
    /// Replace ZIC by SSOR when the incomplete factorization breaks down.
    pub zic_fallback: bool,
    pub control_variates: bool,
    /// Route Gaussian responses through the Laplace machinery.
    pub force_laplace: bool,
    pub warm_start: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Krylov,
            precond: PrecondKind::Ssor,
            num_probes: 50,
            seed: 1,
            cg: CgConfig { tol: 1e-2, max_iter: 1000 },
            solve_rel_tol: 1e-8,
            mode_tol: 1e-8,
            max_newton: 100,
            oracle_cap: DEFAULT_CAP,
            zic_fallback: true,
            control_variates: true,
            force_laplace: false,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub precond_used: Option<PrecondKind>,
    pub zic_fell_back: bool,
    /// Total CG iterations over probe solves.
    pub probe_cg_iterations: usize,
    pub probe_cg_max_iterations: usize,
    pub probe_not_converged: usize,
    pub solve_cg_iterations: usize,
    pub slq_std_error: Option<f64>,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllBundle {
    pub nll: f64,
    /// `∂/∂ log σ_k²`
    pub grad_re: Vec<f64>,
    /// `∂/∂ log σ²`, Gaussian only.
    pub grad_error_variance: Option<f64>,
    pub grad_beta: Vec<f64>,
    pub backend: Backend,
    pub logdet_m: f64,
    pub diagnostics: Diagnostics,
}

impl NllBundle {
    /// Gradient in the order of [`ModelParams::to_unconstrained`].
    pub fn gradient(&self) -> Vec<f64> {
        let mut g = self.grad_re.clone();
        if let Some(s) = self.grad_error_variance {
            g.push(s);
        }
        g.extend_from_slice(&self.grad_beta);
        g
    }
}

/// Laplace mode `b*` of `log p(y | Xβ + Zb) − ½ bᵀΣ⁻¹b`.
#[derive(Debug, Clone)]
pub struct ModeState {
    pub b: Vec<f64>,
    pub mu: Vec<f64>,
    pub derivs: DerivStack,
    pub iterations: usize,
    pub converged: bool,
    /// `‖Zᵀd1 − Σ⁻¹b‖∞` at the returned mode.
    pub stationarity: f64,
}

/// Factorized or preconditioned `M` for one `(W, Σ⁻¹)` pair.
pub(crate) enum System {
    Krylov { m: NormalMatrix, p: Preconditioner },
    Dense { m: NormalMatrix, f: DenseFactor },
}

impl System {
    pub(crate) fn build(
        cfg: &EvalConfig,
        pattern: &NormalPattern,
        w: &[f64],
        sigma_inv: &[f64],
        diag: &mut Diagnostics,
    ) -> Result<Self> {
        let m = pattern.assemble(w, sigma_inv)?;
        match cfg.backend {
            Backend::Cholesky => {
                let f = DenseFactor::from_normal(&m, cfg.oracle_cap)?;
                Ok(System::Dense { m, f })
            }
            Backend::Krylov => {
                let p = match Preconditioner::build(cfg.precond, &m, cfg.seed) {
                    Err(Error::ZicBreakdown { .. }) if cfg.zic_fallback => {
                        diag.zic_fell_back = true;
                        Preconditioner::build(PrecondKind::Ssor, &m, cfg.seed)?
                    }
                    other => other?,
                };
                diag.precond_used = Some(p.kind());
                Ok(System::Krylov { m, p })
            }
        }
    }

    pub(crate) fn matrix(&self) -> &NormalMatrix {
        match self {
            System::Krylov { m, .. } | System::Dense { m, .. } => m,
        }
    }

    pub(crate) fn precond(&self) -> Option<&Preconditioner> {
        match self {
            System::Krylov { p, .. } => Some(p),
            System::Dense { .. } => None,
        }
    }

    /// `M⁻¹ rhs` with an explicit CG configuration; exact on the dense
    /// backend. Returns the solution, the iteration count and convergence.
    pub(crate) fn solve_cg(&self, rhs: &[f64], cg: CgConfig) -> Result<(Vec<f64>, usize, bool)> {
        match self {
            System::Dense { f, .. } => Ok((f.solve(rhs), 0, true)),
            System::Krylov { m, p } => {
                let res = pcg_solve(m, p, rhs, cg, false)?;
                Ok((res.solution, res.iterations, res.converged))
            }
        }
    }

    /// `M⁻¹ rhs` to the mean-path tolerance.
    pub(crate) fn solve(&self, rhs: &[f64], cfg: &EvalConfig, diag: &mut Diagnostics) -> Result<Vec<f64>> {
        match self {
            System::Dense { f, .. } => Ok(f.solve(rhs)),
            System::Krylov { m, p } => {
                let nr = norm2(rhs);
                if nr == 0.0 {
                    return Ok(vec![0.0; rhs.len()]);
                }
                let c = CgConfig { tol: cfg.solve_rel_tol * nr, max_iter: cfg.cg.max_iter };
                let res = pcg_solve(m, p, rhs, c, false)?;
                diag.solve_cg_iterations += res.iterations;
                Ok(res.solution)
            }
        }
    }
}

/// Log-determinant of `M` and the trace terms its derivatives need.
struct LogdetParts {
    value: f64,
    slq: Option<SlqEstimate>,
    inverse: Option<nalgebra::DMatrix<f64>>,
}

fn logdet_parts(sys: &System, cfg: &EvalConfig, with_grad: bool, diag: &mut Diagnostics) -> Result<LogdetParts> {
    match sys {
        System::Dense { f, .. } => Ok(LogdetParts {
            value: f.logdet(),
            slq: None,
            inverse: if with_grad { Some(f.inverse()) } else { None },
        }),
        System::Krylov { m, p } => {
            let probes = ProbeSet::new(cfg.num_probes, ProbeKind::GaussianP, cfg.seed, Domain::LogDet);
            let est = slq_logdet(m, p, &probes, cfg.cg)?;
            diag.probe_cg_iterations += est.iterations.iter().sum::<usize>();
            diag.probe_cg_max_iterations = diag.probe_cg_max_iterations.max(est.iterations.iter().copied().max().unwrap_or(0));
            diag.probe_not_converged += if est.all_converged { 0 } else { 1 };
            diag.slq_std_error = Some(est.std_error());
            Ok(LogdetParts { value: est.value, slq: Some(est), inverse: None })
        }
    }
}

impl LogdetParts {
    /// `tr(M⁻¹ ∂M/∂log σ_k²)` per factor.
    fn trace_theta(&self, sys: &System, blocks: &[Range<usize>], cv: bool) -> Vec<f64> {
        let m = sys.matrix();
        match (&self.inverse, &self.slq, sys) {
            (Some(inv), _, _) => blocks.iter().map(|b| b.clone().map(|j| -m.sigma_inv()[j] * inv[(j, j)]).sum()).collect(),
            (None, Some(slq), System::Krylov { p, .. }) => {
                if cv {
                    ste_logdet_grad_theta(m, p, &slq.solves, blocks).estimate
                } else {
                    ste_logdet_grad_theta_plain(m, &slq.solves, blocks)
                }
            }
            _ => unreachable!("gradient parts requested without gradient data"),
        }
    }

    /// `tr(M⁻¹ ZᵀWZ)`
    fn trace_ztwz(&self, sys: &System, cv: bool) -> f64 {
        let m = sys.matrix();
        match (&self.inverse, &self.slq, sys) {
            (Some(inv), _, _) => (0..m.dim()).map(|j| 1.0 - m.sigma_inv()[j] * inv[(j, j)]).sum(),
            (None, Some(slq), System::Krylov { p, .. }) => {
                if cv {
                    ste_trace_ztwz(m, p, &slq.solves).estimate[0]
                } else {
                    let mut g = vec![0.0; m.dim()];
                    let t = slq.solves.count();
                    (0..t)
                        .map(|i| {
                            m.ztwz_apply(&slq.solves.pinv_z[i], &mut g);
                            dot(&slq.solves.minv_z[i], &g)
                        })
                        .sum::<f64>()
                        / t as f64
                }
            }
            _ => unreachable!("gradient parts requested without gradient data"),
        }
    }

    /// `tr(M⁻¹ ∂M/∂μ_i)` per observation, with `∂M/∂μ_i = −d3_i Z_iᵀZ_i`.
    fn trace_mode(&self, sys: &System, design: &GroupedDesign, d3: &[f64], cv: bool) -> Vec<f64> {
        let z = &design.z;
        match (&self.inverse, &self.slq, sys) {
            (Some(inv), _, _) => (0..z.n_rows())
                .map(|i| {
                    if d3[i] == 0.0 {
                        return 0.0;
                    }
                    let cols = z.row(i);
                    let mut s = 0.0;
                    for &a in cols {
                        for &b in cols {
                            s += inv[(a, b)];
                        }
                    }
                    -d3[i] * s
                })
                .collect(),
            (None, Some(slq), System::Krylov { m, p }) => {
                if cv {
                    ste_logdet_grad_mode(m, p, &slq.solves, z, d3).estimate
                } else {
                    let none = Preconditioner::build(PrecondKind::None, m, 0).expect("identity");
                    ste_logdet_grad_mode(m, &none, &slq.solves, z, d3).estimate
                }
            }
            _ => unreachable!("gradient parts requested without gradient data"),
        }
    }
}

fn ste_logdet_grad_theta_plain(m: &NormalMatrix, solves: &crate::krylov::ProbeSolves, blocks: &[Range<usize>]) -> Vec<f64> {
    let t = solves.count();
    let sinv = m.sigma_inv();
    blocks
        .iter()
        .map(|blk| {
            (0..t)
                .map(|i| blk.clone().map(|j| -sinv[j] * solves.minv_z[i][j] * solves.pinv_z[i][j]).sum::<f64>())
                .sum::<f64>()
                / t as f64
        })
        .collect()
}

/// Evaluates the negative log-marginal likelihood for one dataset. Holds the
/// sparsity pattern of `M` and the warm-start mode between calls.
pub struct Evaluator<'a> {
    design: &'a GroupedDesign,
    family: Family,
    cfg: EvalConfig,
    pattern: NormalPattern,
    blocks: Vec<Range<usize>>,
    warm: Option<Vec<f64>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(design: &'a GroupedDesign, family: Family, cfg: EvalConfig) -> Result<Self> {
        if design.n() == 0 {
            return Err(Error::InvalidInput("no observations".into()));
        }
        if cfg.backend == Backend::Krylov && cfg.num_probes == 0 {
            return Err(Error::InvalidInput("the Krylov backend needs at least one probe".into()));
        }
        let blocks = (0..design.n_factors()).map(|k| design.z.factor_range(k)).collect();
        Ok(Self { design, family, cfg, pattern: NormalPattern::new(&design.z), blocks, warm: None })
    }

    pub fn config(&self) -> &EvalConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut EvalConfig {
        &mut self.cfg
    }

    pub fn design(&self) -> &GroupedDesign {
        self.design
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn pattern(&self) -> &NormalPattern {
        &self.pattern
    }

    pub fn clear_warm_start(&mut self) {
        self.warm = None;
    }

    pub fn evaluate(&mut self, params: &ModelParams, with_grad: bool) -> Result<NllBundle> {
        params.validate(self.design, self.family)?;
        if self.family == Family::Gaussian && !self.cfg.force_laplace {
            self.gaussian_nll(params, with_grad)
        } else {
            let mut diag = Diagnostics::default();
            let mode = self.find_mode_with(params, &mut diag)?;
            self.laplace_nll_with(params, &mode, with_grad, diag)
        }
    }

    /// Gaussian likelihood through `Ψ⁻¹ = W − WZM⁻¹ZᵀW` and
    /// `log det Ψ = log det M + log det Σ + n log σ²`.
    pub fn gaussian_nll(&self, params: &ModelParams, with_grad: bool) -> Result<NllBundle> {
        params.validate(self.design, Family::Gaussian)?;
        let d = self.design;
        let n = d.n();
        let s2 = params.error_variance.expect("validated");
        let w = 1.0 / s2;
        let sinv = params.sigma_inv(&d.z);
        let mut diag = Diagnostics::default();
        let sys = System::build(&self.cfg, &self.pattern, &vec![w; n], &sinv, &mut diag)?;
        let fx = d.fixed_effects(&params.beta);
        let r: Vec<f64> = d.y.iter().zip(&fx).map(|(a, b)| a - b).collect();
        let rhs: Vec<f64> = d.z.t_matvec(&r)?.iter().map(|v| v * w).collect();
        let x = sys.solve(&rhs, &self.cfg, &mut diag)?;
        let zx = d.z.matvec(&x)?;
        // α = Ψ⁻¹ r
        let alpha: Vec<f64> = r.iter().zip(&zx).map(|(ri, zi)| w * (ri - zi)).collect();
        let quad = dot(&r, &alpha);
        let ld = logdet_parts(&sys, &self.cfg, with_grad, &mut diag)?;
        let logdet_sigma: f64 = sinv.iter().map(|s| -s.ln()).sum();
        let logdet_psi = ld.value + logdet_sigma + n as f64 * s2.ln();
        let nll = 0.5 * n as f64 * (2.0 * PI).ln() + 0.5 * logdet_psi + 0.5 * quad;
        if !nll.is_finite() {
            return Err(Error::NonFinite("negative log-likelihood"));
        }
        let (grad_re, grad_s2, grad_beta) = if with_grad {
            let cv = self.cfg.control_variates;
            let tr = ld.trace_theta(&sys, &self.blocks, cv);
            let zta = d.z.t_matvec(&alpha)?;
            let grad_re = self
                .blocks
                .iter()
                .enumerate()
                .map(|(k, blk)| {
                    let sk = params.re_variances[k];
                    let q: f64 = blk.clone().map(|j| zta[j] * zta[j]).sum();
                    0.5 * (tr[k] + blk.len() as f64) - 0.5 * sk * q
                })
                .collect();
            let tr_g = ld.trace_ztwz(&sys, cv);
            let grad_s2 = 0.5 * (n as f64 - tr_g) - 0.5 * s2 * dot(&alpha, &alpha);
            let grad_beta = d.xt_apply(&alpha).iter().map(|v| -v).collect();
            (grad_re, Some(grad_s2), grad_beta)
        } else {
            (Vec::new(), None, Vec::new())
        };
        Ok(NllBundle {
            nll,
            grad_re,
            grad_error_variance: if with_grad { grad_s2 } else { None },
            grad_beta,
            backend: self.cfg.backend,
            logdet_m: ld.value,
            diagnostics: diag,
        })
    }

    pub fn find_mode(&mut self, params: &ModelParams) -> Result<ModeState> {
        let mut diag = Diagnostics::default();
        self.find_mode_with(params, &mut diag)
    }

    fn find_mode_with(&mut self, params: &ModelParams, diag: &mut Diagnostics) -> Result<ModeState> {
        let d = self.design;
        let lik = params.likelihood(self.family)?;
        lik.validate_response(&d.y)?;
        let sinv = params.sigma_inv(&d.z);
        let m_dim = d.z.n_cols();
        let fx = d.fixed_effects(&params.beta);
        let mut b = match (&self.warm, self.cfg.warm_start) {
            (Some(wb), true) if wb.len() == m_dim => wb.clone(),
            _ => vec![0.0; m_dim],
        };
        let eval = |b: &[f64]| -> Result<(Vec<f64>, DerivStack, f64)> {
            let zb = d.z.matvec(b)?;
            let mu: Vec<f64> = fx.iter().zip(&zb).map(|(a, c)| a + c).collect();
            let ds = lik.eval_derivs(&d.y, &mu)?;
            let pen: f64 = b.iter().zip(&sinv).map(|(bi, si)| bi * bi * si).sum();
            let obj = ds.logp - 0.5 * pen;
            if !obj.is_finite() {
                return Err(Error::NonFinite("inner objective"));
            }
            Ok((mu, ds, obj))
        };
        let (mut mu, mut ds, mut obj) = eval(&b)?;
        let mut iterations = 0;
        let mut converged = false;
        let mut last_change = f64::INFINITY;
        while iterations < self.cfg.max_newton {
            iterations += 1;
            let w = ds.w();
            let sys = System::build(&self.cfg, &self.pattern, &w, &sinv, diag)?;
            let ztd1 = d.z.t_matvec(&ds.d1)?;
            let grad: Vec<f64> = ztd1.iter().zip(&b).zip(&sinv).map(|((g, bi), si)| g - si * bi).collect();
            let step = sys.solve(&grad, &self.cfg, diag)?;
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=10 {
                let cand: Vec<f64> = b.iter().zip(&step).map(|(bi, si)| bi + t * si).collect();
                if let Ok((cmu, cds, cobj)) = eval(&cand) {
                    if cobj >= obj - 1e-12 * obj.abs() {
                        accepted = Some((cand, cmu, cds, cobj));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((nb, nmu, nds, nobj)) = accepted else {
                // No ascent along the Newton direction: numerically stationary.
                converged = true;
                break;
            };
            last_change = (nobj - obj).abs();
            let rel = last_change / obj.abs().max(1e-300);
            b = nb;
            mu = nmu;
            ds = nds;
            obj = nobj;
            if rel <= self.cfg.mode_tol {
                converged = true;
                break;
            }
        }
        diag.newton_iterations += iterations;
        if !converged {
            return Err(Error::ModeNotConverged { iterations, last_change });
        }
        let ztd1 = d.z.t_matvec(&ds.d1)?;
        let stationarity = ztd1.iter().zip(&b).zip(&sinv).map(|((g, bi), si)| (g - si * bi).abs()).fold(0.0, f64::max);
        if self.cfg.warm_start {
            self.warm = Some(b.clone());
        }
        Ok(ModeState { b, mu, derivs: ds, iterations, converged, stationarity })
    }

    /// Laplace-approximated negative log-marginal likelihood at a converged mode.
    pub fn laplace_nll(&self, params: &ModelParams, mode: &ModeState, with_grad: bool) -> Result<NllBundle> {
        self.laplace_nll_with(params, mode, with_grad, Diagnostics::default())
    }

    fn laplace_nll_with(
        &self,
        params: &ModelParams,
        mode: &ModeState,
        with_grad: bool,
        mut diag: Diagnostics,
    ) -> Result<NllBundle> {
        if !mode.converged {
            return Err(Error::ModeNotConverged { iterations: mode.iterations, last_change: f64::NAN });
        }
        let d = self.design;
        let n = d.n();
        let lik = params.likelihood(self.family)?;
        let sinv = params.sigma_inv(&d.z);
        let ds = &mode.derivs;
        let w = ds.w();
        let sys = System::build(&self.cfg, &self.pattern, &w, &sinv, &mut diag)?;
        let ld = logdet_parts(&sys, &self.cfg, with_grad, &mut diag)?;
        let pen: f64 = mode.b.iter().zip(&sinv).map(|(bi, si)| bi * bi * si).sum();
        let logdet_sigma: f64 = sinv.iter().map(|s| -s.ln()).sum();
        let nll = -ds.logp + 0.5 * pen + 0.5 * logdet_sigma + 0.5 * ld.value;
        if !nll.is_finite() {
            return Err(Error::NonFinite("negative log-likelihood"));
        }
        if !with_grad {
            return Ok(NllBundle {
                nll,
                grad_re: Vec::new(),
                grad_error_variance: None,
                grad_beta: Vec::new(),
                backend: self.cfg.backend,
                logdet_m: ld.value,
                diagnostics: diag,
            });
        }
        let cv = self.cfg.control_variates;
        let tr_theta = ld.trace_theta(&sys, &self.blocks, cv);
        let any_d3 = ds.d3.iter().any(|v| *v != 0.0);
        // g_μ = ½ tr(M⁻¹ ∂M/∂μ_i); v = M⁻¹ Zᵀ g_μ carries the mode dependence.
        let g_mu: Vec<f64> = if any_d3 {
            ld.trace_mode(&sys, d, &ds.d3, cv).iter().map(|t| 0.5 * t).collect()
        } else {
            vec![0.0; n]
        };
        let v = if any_d3 { sys.solve(&d.z.t_matvec(&g_mu)?, &self.cfg, &mut diag)? } else { vec![0.0; d.z.n_cols()] };
        let b = &mode.b;
        let grad_re = self
            .blocks
            .iter()
            .enumerate()
            .map(|(k, blk)| {
                let explicit: f64 =
                    blk.clone().map(|j| -0.5 * b[j] * b[j] * sinv[j]).sum::<f64>() + 0.5 * blk.len() as f64 + 0.5 * tr_theta[k];
                let implicit: f64 = blk.clone().map(|j| v[j] * sinv[j] * b[j]).sum();
                explicit + implicit
            })
            .collect();
        let zv = d.z.matvec(&v)?;
        let dl_df: Vec<f64> = (0..n).map(|i| -ds.d1[i] + g_mu[i] - w[i] * zv[i]).collect();
        let grad_beta = d.xt_apply(&dl_df);
        let grad_error_variance = match lik {
            Likelihood::Gaussian { sigma2 } => {
                let rss: f64 = d.y.iter().zip(&mode.mu).map(|(y, m)| (y - m) * (y - m)).sum();
                let tr_g = ld.trace_ztwz(&sys, cv);
                Some(0.5 * n as f64 - 0.5 * rss / sigma2 - 0.5 * tr_g)
            }
            Likelihood::BernoulliLogit => None,
        };
        Ok(NllBundle {
            nll,
            grad_re,
            grad_error_variance,
            grad_beta,
            backend: self.cfg.backend,
            logdet_m: ld.value,
            diagnostics: diag,
        })
    }
}

/// Negative log-marginal likelihood of one parameter vector; convenience
/// wrapper over [`Evaluator`].
pub fn evaluate_nll(
    design: &GroupedDesign,
    family: Family,
    params: &ModelParams,
    cfg: EvalConfig,
    with_grad: bool,
) -> Result<NllBundle> {
    Evaluator::new(design, family, cfg)?.evaluate(params, with_grad)
}
