//! Preconditioned conjugate gradients with Lanczos tridiagonal capture,
//! partial Lanczos with full reorthogonalization, stochastic Lanczos
//! quadrature for `log det M`, and stochastic trace estimators with SSOR
//! control variates.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, mean, norm2, sample_cov, sample_var, SymOperator};
use crate::par::map_indexed;
use crate::precond::Preconditioner;
use crate::probes::{fill_normal, ProbeKind, ProbeSet};
use crate::sparse::{Incidence, NormalMatrix};
use crate::tridiag::SymTridiag;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    /// Absolute tolerance on `‖r‖₂`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self { tol: 1e-2, max_iter: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    /// False when `max_iter` was reached before the tolerance.
    pub converged: bool,
    /// `r₀ᵀ P⁻¹ r₀`
    pub r0_z0: f64,
    /// `P⁻¹ b`
    pub precond_rhs: Vec<f64>,
    pub tridiag: Option<SymTridiag>,
}

/// Solves `A u = b` by preconditioned CG from `u₀ = 0`. With `capture` the
/// Lanczos tridiagonal matrix of `P^{-1/2} A P^{-T/2}` is rebuilt from the CG
/// coefficients.
pub fn pcg_solve<A: SymOperator + ?Sized>(
    a: &A,
    p: &Preconditioner,
    b: &[f64],
    cfg: CgConfig,
    capture: bool,
) -> Result<CgResult> {
    let n = a.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: b.len() });
    }
    if p.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: p.dim() });
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidInput("CG tolerance must be positive".into()));
    }
    let mut u = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = p.solve(&r);
    let precond_rhs = z.clone();
    let mut h = z.clone();
    let mut v = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let r0_z0 = rz;
    let mut diag = Vec::new();
    let mut off = Vec::new();
    let (mut alpha_prev, mut beta_prev) = (1.0, 0.0);
    let mut res = norm2(&r);
    if !res.is_finite() {
        return Err(Error::NonFinite("CG right-hand side"));
    }
    if res == 0.0 {
        return Ok(CgResult {
            solution: u,
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
            r0_z0,
            precond_rhs,
            tridiag: capture.then(SymTridiag::default),
        });
    }
    let mut iterations = 0;
    let mut converged = false;
    for l in 0..cfg.max_iter {
        a.apply(&h, &mut v);
        let curvature = dot(&h, &v);
        if !curvature.is_finite() {
            return Err(Error::NonFinite("CG iterate"));
        }
        if curvature <= 0.0 {
            return Err(Error::CgBreakdown { iteration: l, curvature });
        }
        let alpha = rz / curvature;
        axpy(alpha, &h, &mut u);
        axpy(-alpha, &v, &mut r);
        res = norm2(&r);
        if !res.is_finite() {
            return Err(Error::NonFinite("CG residual"));
        }
        iterations = l + 1;
        let stop = res < cfg.tol;
        z.copy_from_slice(&r);
        p.solve_in_place(&mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        if capture {
            diag.push(1.0 / alpha + beta_prev / alpha_prev);
            if l > 0 {
                off.push(beta_prev.sqrt() / alpha_prev);
            }
        }
        for (hi, zi) in h.iter_mut().zip(&z) {
            *hi = zi + beta * *hi;
        }
        rz = rz_next;
        alpha_prev = alpha;
        beta_prev = beta;
        if stop {
            converged = true;
            break;
        }
    }
    Ok(CgResult {
        solution: u,
        iterations,
        residual_norm: res,
        converged,
        r0_z0,
        precond_rhs,
        tridiag: if capture { Some(SymTridiag { diag, off }) } else { None },
    })
}

/// Orthonormal Lanczos basis (`m × r`, column-major) and its tridiagonal
/// projection; `r < k` when the Krylov space is exhausted.
#[derive(Debug, Clone)]
pub struct LanczosResult {
    pub basis: Vec<f64>,
    pub dim: usize,
    pub tridiag: SymTridiag,
}

impl LanczosResult {
    pub fn rank(&self) -> usize {
        self.tridiag.dim()
    }

    pub fn basis_column(&self, j: usize) -> &[f64] {
        &self.basis[j * self.dim..(j + 1) * self.dim]
    }
}

/// `k` steps of Lanczos from `q0` with two-pass full reorthogonalization.
pub fn lanczos_partial<A: SymOperator + ?Sized>(a: &A, q0: &[f64], k: usize) -> Result<LanczosResult> {
    let n = a.dim();
    if q0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: q0.len() });
    }
    let nq = norm2(q0);
    if !(nq > 0.0) {
        return Err(Error::InvalidInput("Lanczos start vector must be nonzero".into()));
    }
    let k = k.min(n).max(1);
    let mut basis: Vec<f64> = q0.iter().map(|v| v / nq).collect();
    let mut diag = Vec::with_capacity(k);
    let mut off = Vec::with_capacity(k);
    let mut w = vec![0.0; n];
    let mut scale = 0.0f64;
    for j in 0..k {
        a.apply(&basis[j * n..(j + 1) * n], &mut w);
        let alpha = dot(&w, &basis[j * n..(j + 1) * n]);
        diag.push(alpha);
        scale = scale.max(alpha.abs());
        for _ in 0..2 {
            for q in 0..=j {
                let col = &basis[q * n..(q + 1) * n];
                let c = dot(&w, col);
                axpy(-c, col, &mut w);
            }
        }
        if j + 1 == k {
            break;
        }
        let beta = norm2(&w);
        scale = scale.max(beta);
        if !(beta > 1e-10 * scale) {
            break;
        }
        off.push(beta);
        basis.extend(w.iter().map(|v| v / beta));
    }
    let r = diag.len();
    off.truncate(r.saturating_sub(1));
    basis.truncate(r * n);
    Ok(LanczosResult { basis, dim: n, tridiag: SymTridiag { diag, off } })
}

/// Probe vectors with their solves, kept for trace estimation.
#[derive(Debug, Clone, Default)]
pub struct ProbeSolves {
    pub z: Vec<Vec<f64>>,
    pub pinv_z: Vec<Vec<f64>>,
    pub minv_z: Vec<Vec<f64>>,
}

impl ProbeSolves {
    pub fn count(&self) -> usize {
        self.z.len()
    }
}

#[derive(Debug, Clone)]
pub struct SlqEstimate {
    pub value: f64,
    pub logdet_p: f64,
    /// `‖P^{-1/2}z_i‖² e₁ᵀ log(T̃_i) e₁` per probe.
    pub contributions: Vec<f64>,
    pub iterations: Vec<usize>,
    pub all_converged: bool,
    pub solves: ProbeSolves,
}

impl SlqEstimate {
    /// Monte Carlo standard error of `value`.
    pub fn std_error(&self) -> f64 {
        let t = self.contributions.len() as f64;
        (sample_var(&self.contributions) / t).sqrt()
    }
}

/// Draws probe `i` of a set for the given preconditioner.
pub fn draw_probe(probes: &ProbeSet, p: &Preconditioner, i: usize, len: usize) -> Vec<f64> {
    let mut rng = probes.rng(i);
    match probes.kind {
        ProbeKind::GaussianP => p.sample(&mut rng),
        ProbeKind::GaussianI => {
            let mut v = vec![0.0; len];
            fill_normal(&mut rng, &mut v);
            v
        }
        ProbeKind::Rademacher => crate::probes::rademacher_vec(&mut rng, len),
    }
}

/// `log det M ≈ log det P + (1/t) Σ ‖P^{-1/2}z_i‖² e₁ᵀ log(T̃_i) e₁` with
/// `z_i ~ N(0, P)`.
pub fn slq_logdet(m: &NormalMatrix, p: &Preconditioner, probes: &ProbeSet, cfg: CgConfig) -> Result<SlqEstimate> {
    if probes.count == 0 {
        return Err(Error::InvalidInput("SLQ needs at least one probe".into()));
    }
    let dim = m.dim();
    let runs: Vec<Result<(Vec<f64>, CgResult, f64)>> = map_indexed(probes.count, |i| {
        let z = draw_probe(probes, p, i, dim);
        let cg = pcg_solve(m, p, &z, cfg, true)?;
        let t = cg.tridiag.as_ref().expect("captured");
        let quad = if t.dim() == 0 { 0.0 } else { t.log_quadrature()? };
        let contribution = cg.r0_z0 * quad;
        Ok((z, cg, contribution))
    });
    let mut solves = ProbeSolves::default();
    let mut contributions = Vec::with_capacity(probes.count);
    let mut iterations = Vec::with_capacity(probes.count);
    let mut all_converged = true;
    for run in runs {
        let (z, cg, c) = run?;
        all_converged &= cg.converged;
        iterations.push(cg.iterations);
        contributions.push(c);
        solves.z.push(z);
        solves.pinv_z.push(cg.precond_rhs);
        solves.minv_z.push(cg.solution);
    }
    let logdet_p = p.logdet();
    Ok(SlqEstimate { value: logdet_p + mean(&contributions), logdet_p, contributions, iterations, all_converged, solves })
}

/// Trace estimates per coordinate with optional control variates.
#[derive(Debug, Clone, PartialEq)]
pub struct SteTerm {
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Control-variate weights; zero when no control variate was used.
    pub weights: Vec<f64>,
}

/// Combines per-probe samples `h[i][j]` into estimates of `E[h_j]`. With a
/// control variate `r[i][j]` of known mean `det[j]`, the estimate is
/// `c_j·det_j + mean(h_j) − c_j·mean(r_j)` with `c_j = Cov(h_j, r_j)/Var(r_j)`.
pub fn combine_control_variate(h: &[Vec<f64>], cv: Option<(&[Vec<f64>], &[f64])>) -> SteTerm {
    let t = h.len();
    let q = h.first().map_or(0, Vec::len);
    let mut estimate = vec![0.0; q];
    let mut std_error = vec![0.0; q];
    let mut weights = vec![0.0; q];
    let mut hs = vec![0.0; t];
    let mut rs = vec![0.0; t];
    for j in 0..q {
        for i in 0..t {
            hs[i] = h[i][j];
        }
        match cv {
            Some((r, det)) if t >= 2 => {
                for i in 0..t {
                    rs[i] = r[i][j];
                }
                let var_r = sample_var(&rs);
                let scale = rs.iter().map(|v| v * v).sum::<f64>() / t as f64;
                let c = if var_r > 1e-13 * scale && var_r > 0.0 { sample_cov(&hs, &rs) / var_r } else { 0.0 };
                let adjusted: Vec<f64> = hs.iter().zip(&rs).map(|(a, b)| a - c * b).collect();
                estimate[j] = c * det[j] + mean(&adjusted);
                std_error[j] = (sample_var(&adjusted) / t as f64).sqrt();
                weights[j] = c;
            }
            _ => {
                estimate[j] = mean(&hs);
                std_error[j] = if t >= 2 { (sample_var(&hs) / t as f64).sqrt() } else { 0.0 };
            }
        }
    }
    SteTerm { estimate, std_error, weights }
}

/// Quantities of the SSOR control variate for one probe: `u = P⁻¹z`,
/// `a = (L+D)ᵀu`, `b = D⁻¹a`.
struct SsorParts {
    a: Vec<f64>,
    b: Vec<f64>,
}

fn ssor_parts(m: &NormalMatrix, u: &[f64]) -> SsorParts {
    let mut a = vec![0.0; u.len()];
    m.mul_upper(u, &mut a);
    let b = a.iter().zip(m.diag()).map(|(x, d)| x / d).collect();
    SsorParts { a, b }
}

/// `tr(M⁻¹ ∂M/∂log σ_k²)` for every factor block, where the derivative is
/// `−Σ⁻¹` restricted to block `k`.
pub fn ste_logdet_grad_theta(
    m: &NormalMatrix,
    p: &Preconditioner,
    solves: &ProbeSolves,
    blocks: &[Range<usize>],
) -> SteTerm {
    let sinv = m.sigma_inv();
    let t = solves.count();
    let h: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            blocks
                .iter()
                .map(|blk| blk.clone().map(|j| -sinv[j] * solves.minv_z[i][j] * solves.pinv_z[i][j]).sum())
                .collect()
        })
        .collect();
    if !p.is_ssor() {
        return combine_control_variate(&h, None);
    }
    let d = m.diag();
    let det: Vec<f64> = blocks.iter().map(|blk| blk.clone().map(|j| -sinv[j] / d[j]).sum()).collect();
    // ∂(L+D) = ∂D = −Σ⁻¹ on the block: r = Σ_j ∂D_j (2 u_j b_j − a_j²/D_j²).
    let r: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let u = &solves.pinv_z[i];
            let parts = ssor_parts(m, u);
            blocks
                .iter()
                .map(|blk| {
                    blk.clone()
                        .map(|j| -sinv[j] * (2.0 * u[j] * parts.b[j] - parts.a[j] * parts.a[j] / (d[j] * d[j])))
                        .sum()
                })
                .collect()
        })
        .collect();
    combine_control_variate(&h, Some((&r, &det)))
}

/// `tr(M⁻¹ ZᵀWZ)`. The log-variance derivative of `M` for the Gaussian
/// error variance is `−ZᵀWZ`.
pub fn ste_trace_ztwz(m: &NormalMatrix, p: &Preconditioner, solves: &ProbeSolves) -> SteTerm {
    let t = solves.count();
    let dim = m.dim();
    let sinv = m.sigma_inv();
    let d = m.diag();
    let mut gv = vec![0.0; dim];
    let mut h = Vec::with_capacity(t);
    let mut r = Vec::with_capacity(t);
    for i in 0..t {
        let u = &solves.pinv_z[i];
        m.ztwz_apply(u, &mut gv);
        h.push(vec![dot(&solves.minv_z[i], &gv)]);
        if p.is_ssor() {
            let parts = ssor_parts(m, u);
            // ∂(L+D) = (L+D) − Σ⁻¹, ∂D = D − Σ⁻¹.
            let mut lb = vec![0.0; dim];
            m.mul_lower(&parts.b, &mut lb);
            let mut acc = 0.0;
            for j in 0..dim {
                let dd = d[j] - sinv[j];
                acc += 2.0 * u[j] * (lb[j] - sinv[j] * parts.b[j]) - parts.a[j] * parts.a[j] * dd / (d[j] * d[j]);
            }
            r.push(vec![acc]);
        }
    }
    if !p.is_ssor() {
        return combine_control_variate(&h, None);
    }
    let det = [(0..dim).map(|j| (d[j] - sinv[j]) / d[j]).sum::<f64>()];
    combine_control_variate(&h, Some((&r, &det)))
}

/// `tr(M⁻¹ ∂M/∂μ_i)` for every observation, with `∂M/∂μ_i = −d3_i Z_iᵀZ_i`.
pub fn ste_logdet_grad_mode(
    m: &NormalMatrix,
    p: &Preconditioner,
    solves: &ProbeSolves,
    z: &Incidence,
    d3: &[f64],
) -> SteTerm {
    let t = solves.count();
    let n = z.n_rows();
    let mut zm = vec![0.0; n];
    let mut zp = vec![0.0; n];
    let mut h = Vec::with_capacity(t);
    let mut r = Vec::with_capacity(t);
    let ssor = p.is_ssor();
    let d = m.diag();
    for i in 0..t {
        z.matvec_into(&solves.minv_z[i], &mut zm);
        z.matvec_into(&solves.pinv_z[i], &mut zp);
        h.push((0..n).map(|row| -d3[row] * zm[row] * zp[row]).collect::<Vec<f64>>());
        if ssor {
            let u = &solves.pinv_z[i];
            let parts = ssor_parts(m, u);
            let ri = (0..n)
                .map(|row| {
                    if d3[row] == 0.0 {
                        return 0.0;
                    }
                    let cols = z.row(row);
                    let mut lower = 0.0;
                    let mut diag_term = 0.0;
                    for (a, &ca) in cols.iter().enumerate() {
                        for &cb in &cols[..=a] {
                            lower += u[ca.max(cb)] * parts.b[ca.min(cb)];
                        }
                        diag_term += parts.a[ca] * parts.a[ca] / (d[ca] * d[ca]);
                    }
                    -d3[row] * (2.0 * lower - diag_term)
                })
                .collect();
            r.push(ri);
        }
    }
    if !ssor {
        return combine_control_variate(&h, None);
    }
    let det: Vec<f64> = (0..n).map(|row| -d3[row] * z.row(row).iter().map(|&c| 1.0 / d[c]).sum::<f64>()).collect();
    combine_control_variate(&h, Some((&r, &det)))
}

/// `Ψ⁻¹ x = W x − W Z M⁻¹ Zᵀ W x`, with one CG solve.
pub fn psi_inv_apply(
    z: &Incidence,
    m: &NormalMatrix,
    p: &Preconditioner,
    w: &[f64],
    x: &[f64],
    cfg: CgConfig,
) -> Result<(Vec<f64>, CgResult)> {
    let wx: Vec<f64> = x.iter().zip(w).map(|(a, b)| a * b).collect();
    let rhs = z.t_matvec(&wx)?;
    let cg = pcg_solve(m, p, &rhs, cfg, false)?;
    let zs = z.matvec(&cg.solution)?;
    let out = wx.iter().zip(&zs).zip(w).map(|((a, b), wi)| a - wi * b).collect();
    Ok((out, cg))
}

#[derive(Debug, Clone)]
pub struct FisherEstimate {
    /// Row-major `q × q`, symmetrized; `q = K` or `K + 1` with the error
    /// variance last.
    pub matrix: Vec<f64>,
    pub dim: usize,
    pub std_error: Vec<f64>,
}

/// Fisher information of the Gaussian model in the natural variance
/// parameters, `½ tr(Ψ⁻¹ ∂Ψ/∂θ_k Ψ⁻¹ ∂Ψ/∂θ_l)`, estimated with `z ~ N(0, I_n)`
/// probes. `∂Ψ/∂σ_k² = Z_kZ_kᵀ` and `∂Ψ/∂σ² = I`.
pub fn ste_fisher_information(
    z: &Incidence,
    m: &NormalMatrix,
    p: &Preconditioner,
    w: &[f64],
    probes: &ProbeSet,
    cfg: CgConfig,
    include_error_variance: bool,
) -> Result<FisherEstimate> {
    let n = z.n_rows();
    let k = z.n_factors();
    let q = if include_error_variance { k + 1 } else { k };
    // Z_f Z_fᵀ x sums x within each level of factor f.
    let apply_dpsi = |f: usize, x: &[f64]| -> Vec<f64> {
        if f == k {
            return x.to_vec();
        }
        let mut sums = vec![0.0; z.n_cols()];
        for (r, &xr) in x.iter().enumerate() {
            sums[z.row(r)[f]] += xr;
        }
        (0..n).map(|r| sums[z.row(r)[f]]).collect()
    };
    let samples: Vec<Result<Vec<f64>>> = map_indexed(probes.count, |i| {
        let mut rng = probes.rng(i);
        let mut zi = vec![0.0; n];
        fill_normal(&mut rng, &mut zi);
        let (psi_z, _) = psi_inv_apply(z, m, p, w, &zi, cfg)?;
        let mut left = Vec::with_capacity(q);
        let mut right = Vec::with_capacity(q);
        for f in 0..q {
            left.push(apply_dpsi(f, &psi_z));
            let (s, _) = psi_inv_apply(z, m, p, w, &apply_dpsi(f, &zi), cfg)?;
            right.push(s);
        }
        let mut out = vec![0.0; q * q];
        for a in 0..q {
            for b in 0..q {
                out[a * q + b] = 0.5 * dot(&left[a], &right[b]);
            }
        }
        Ok(out)
    });
    let mut rows = Vec::with_capacity(probes.count);
    for s in samples {
        rows.push(s?);
    }
    let term = combine_control_variate(&rows, None);
    let mut matrix = term.estimate;
    let mut std_error = term.std_error;
    for a in 0..q {
        for b in 0..a {
            let v = 0.5 * (matrix[a * q + b] + matrix[b * q + a]);
            matrix[a * q + b] = v;
            matrix[b * q + a] = v;
            let s = 0.5 * (std_error[a * q + b] + std_error[b * q + a]);
            std_error[a * q + b] = s;
            std_error[b * q + a] = s;
        }
    }
    Ok(FisherEstimate { matrix, dim: q, std_error })
}
