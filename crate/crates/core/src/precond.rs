//! Preconditioners for `M = Σ⁻¹ + ZᵀWZ`. Every kind is a direct method:
//! `solve`, `logdet` and `sample` are exact up to rounding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::krylov::lanczos_partial;
use crate::linalg::{dot, SymOperator};
use crate::probes::{fill_normal, normal_vec, stream_rng, Domain};
use crate::sparse::{CsrMatrix, NormalMatrix, ZtwzOperator};
use crate::tridiag::tridiag_eigen;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecondKind {
    Ssor,
    Zic,
    Diagonal,
    PivChol(usize),
    LanczosLr(usize),
    None,
}

impl PrecondKind {
    /// Parses `ssor`, `zic`, `diagonal`, `none`, `pivchol[:k]`, `lanczos[:k]`;
    /// low-rank kinds default to rank 50.
    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, rank) = match lower.split_once(':') {
            Some((n, r)) => {
                let k = r
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidInput(format!("invalid preconditioner rank in '{s}'")))?;
                (String::from(n), Some(k))
            }
            None => (lower.clone(), None),
        };
        let k = rank.unwrap_or(50);
        Ok(match name.as_str() {
            "ssor" => PrecondKind::Ssor,
            "zic" | "ichol" => PrecondKind::Zic,
            "diagonal" | "diag" | "jacobi" => PrecondKind::Diagonal,
            "none" | "identity" => PrecondKind::None,
            "pivchol" | "pivoted_cholesky" => PrecondKind::PivChol(k),
            "lanczos" | "lanczoslr" => PrecondKind::LanczosLr(k),
            _ => return Err(Error::InvalidInput(format!("unknown preconditioner '{s}'"))),
        })
    }

    pub fn name(&self) -> String {
        match self {
            PrecondKind::Ssor => "ssor".into(),
            PrecondKind::Zic => "zic".into(),
            PrecondKind::Diagonal => "diagonal".into(),
            PrecondKind::None => "none".into(),
            PrecondKind::PivChol(k) => format!("pivchol:{k}"),
            PrecondKind::LanczosLr(k) => format!("lanczos:{k}"),
        }
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Ssor {
        diag: Vec<f64>,
        lower: CsrMatrix,
    },
    /// Lower factor stored row-wise with the diagonal as the last entry of each row.
    Zic {
        factor: CsrMatrix,
    },
    Diagonal {
        diag: Vec<f64>,
    },
    LowRank {
        sigma_inv: Vec<f64>,
        /// `m × k`, column-major.
        factor: Vec<f64>,
        rank: usize,
        /// Cholesky factor of `I + L_kᵀ Σ L_k`.
        core: DMatrix<f64>,
        core_logdet: f64,
    },
    Identity {
        dim: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Preconditioner {
    kind: PrecondKind,
    inner: Inner,
}

impl Preconditioner {
    /// Builds the preconditioner. `seed` only affects the Lanczos start vector.
    pub fn build(kind: PrecondKind, m: &NormalMatrix, seed: u64) -> Result<Self> {
        match kind {
            PrecondKind::Ssor => build_ssor(m),
            PrecondKind::Zic => build_zic(m),
            PrecondKind::Diagonal => build_diagonal(m),
            PrecondKind::None => Ok(Self { kind, inner: Inner::Identity { dim: m.dim() } }),
            PrecondKind::PivChol(k) => build_pivchol(m, k),
            PrecondKind::LanczosLr(k) => build_lanczos_lr(m, k, seed),
        }
    }

    pub fn kind(&self) -> PrecondKind {
        self.kind
    }

    /// Rank actually achieved by a low-rank kind, zero otherwise.
    pub fn rank(&self) -> usize {
        match &self.inner {
            Inner::LowRank { rank, .. } => *rank,
            _ => 0,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.inner {
            Inner::Ssor { diag, .. } | Inner::Diagonal { diag } => diag.len(),
            Inner::Zic { factor } => factor.nrows(),
            Inner::LowRank { sigma_inv, .. } => sigma_inv.len(),
            Inner::Identity { dim } => *dim,
        }
    }

    pub fn is_ssor(&self) -> bool {
        matches!(self.inner, Inner::Ssor { .. })
    }

    /// `u = P⁻¹ v`
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let mut u = v.to_vec();
        self.solve_in_place(&mut u);
        u
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        match &self.inner {
            Inner::Ssor { diag, lower } => {
                lower_solve(lower, diag, x);
                for (xi, d) in x.iter_mut().zip(diag) {
                    *xi *= d;
                }
                upper_solve(lower, diag, x);
            }
            Inner::Zic { factor } => {
                zic_lower_solve(factor, x);
                zic_upper_solve(factor, x);
            }
            Inner::Diagonal { diag } => {
                for (xi, d) in x.iter_mut().zip(diag) {
                    *xi /= d;
                }
            }
            Inner::LowRank { sigma_inv, factor, rank, core, .. } => {
                let m = sigma_inv.len();
                for (xi, s) in x.iter_mut().zip(sigma_inv) {
                    *xi /= s;
                }
                if *rank == 0 {
                    return;
                }
                let mut t = DVector::zeros(*rank);
                for j in 0..*rank {
                    t[j] = dot(&factor[j * m..(j + 1) * m], x);
                }
                let t = solve_chol(core, t);
                for j in 0..*rank {
                    let col = &factor[j * m..(j + 1) * m];
                    for i in 0..m {
                        x[i] -= col[i] * t[j] / sigma_inv[i];
                    }
                }
            }
            Inner::Identity { .. } => {}
        }
    }

    /// `y = P x`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        match &self.inner {
            Inner::Ssor { diag, lower } => {
                let mut t = vec![0.0; n];
                upper_mul(lower, diag, x, &mut t);
                for (ti, d) in t.iter_mut().zip(diag) {
                    *ti /= d;
                }
                lower_mul(lower, diag, &t, &mut y);
            }
            Inner::Zic { factor } => {
                let mut t = vec![0.0; n];
                zic_upper_mul(factor, x, &mut t);
                factor.matvec_into(&t, &mut y);
            }
            Inner::Diagonal { diag } => {
                for i in 0..n {
                    y[i] = diag[i] * x[i];
                }
            }
            Inner::LowRank { sigma_inv, factor, rank, .. } => {
                for i in 0..n {
                    y[i] = sigma_inv[i] * x[i];
                }
                for j in 0..*rank {
                    let col = &factor[j * n..(j + 1) * n];
                    let c = dot(col, x);
                    for i in 0..n {
                        y[i] += c * col[i];
                    }
                }
            }
            Inner::Identity { .. } => y.copy_from_slice(x),
        }
        y
    }

    pub fn logdet(&self) -> f64 {
        match &self.inner {
            Inner::Ssor { diag, .. } | Inner::Diagonal { diag } => diag.iter().map(|d| d.ln()).sum(),
            Inner::Zic { factor } => {
                let mut acc = 0.0;
                for i in 0..factor.nrows() {
                    let (_, vals) = factor.row(i);
                    acc += 2.0 * vals[vals.len() - 1].ln();
                }
                acc
            }
            Inner::LowRank { sigma_inv, core_logdet, .. } => {
                sigma_inv.iter().map(|s| s.ln()).sum::<f64>() + core_logdet
            }
            Inner::Identity { .. } => 0.0,
        }
    }

    /// Draws `z ~ N(0, P)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        let mut e = vec![0.0; n];
        fill_normal(rng, &mut e);
        match &self.inner {
            Inner::Ssor { diag, lower } => {
                for (ei, d) in e.iter_mut().zip(diag) {
                    *ei /= d.sqrt();
                }
                let mut z = vec![0.0; n];
                lower_mul(lower, diag, &e, &mut z);
                z
            }
            Inner::Zic { factor } => factor.matvec(&e).expect("factor is square"),
            Inner::Diagonal { diag } => e.iter().zip(diag).map(|(x, d)| x * d.sqrt()).collect(),
            Inner::LowRank { sigma_inv, factor, rank, .. } => {
                let mut z: Vec<f64> = e.iter().zip(sigma_inv).map(|(x, s)| x * s.sqrt()).collect();
                let e2 = normal_vec(rng, *rank);
                for j in 0..*rank {
                    let col = &factor[j * n..(j + 1) * n];
                    for i in 0..n {
                        z[i] += col[i] * e2[j];
                    }
                }
                z
            }
            Inner::Identity { .. } => e,
        }
    }

    /// `F⁻¹ x` for the triangular factor `P = F Fᵀ`, where one exists in
    /// sparse form (SSOR, ZIC, diagonal, none).
    pub fn factor_solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        match &self.inner {
            Inner::Ssor { diag, lower } => {
                lower_solve(lower, diag, x);
                for (xi, d) in x.iter_mut().zip(diag) {
                    *xi *= d.sqrt();
                }
            }
            Inner::Zic { factor } => zic_lower_solve(factor, x),
            Inner::Diagonal { diag } => {
                for (xi, d) in x.iter_mut().zip(diag) {
                    *xi /= d.sqrt();
                }
            }
            Inner::Identity { .. } => {}
            Inner::LowRank { .. } => {
                return Err(Error::Unsupported("low-rank preconditioners have no sparse triangular factor".into()))
            }
        }
        Ok(())
    }

    /// `F⁻ᵀ x`
    pub fn factor_t_solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        match &self.inner {
            Inner::Ssor { diag, lower } => {
                for (xi, d) in x.iter_mut().zip(diag) {
                    *xi *= d.sqrt();
                }
                upper_solve(lower, diag, x);
            }
            Inner::Zic { factor } => zic_upper_solve(factor, x),
            Inner::Diagonal { diag } => {
                for (xi, d) in x.iter_mut().zip(diag) {
                    *xi /= d.sqrt();
                }
            }
            Inner::Identity { .. } => {}
            Inner::LowRank { .. } => {
                return Err(Error::Unsupported("low-rank preconditioners have no sparse triangular factor".into()))
            }
        }
        Ok(())
    }

    /// Dense `P`, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply(&e);
            for i in 0..n {
                out[i * n + j] = col[i];
            }
            e[j] = 0.0;
        }
        out
    }
}

impl SymOperator for Preconditioner {
    fn dim(&self) -> usize {
        Preconditioner::dim(self)
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&Preconditioner::apply(self, x));
    }
}

/// `P = (L + D) D⁻¹ (L + D)ᵀ`
pub fn build_ssor(m: &NormalMatrix) -> Result<Preconditioner> {
    check_diag(m.diag())?;
    Ok(Preconditioner {
        kind: PrecondKind::Ssor,
        inner: Inner::Ssor { diag: m.diag().to_vec(), lower: m.lower().clone() },
    })
}

pub fn build_diagonal(m: &NormalMatrix) -> Result<Preconditioner> {
    check_diag(m.diag())?;
    Ok(Preconditioner { kind: PrecondKind::Diagonal, inner: Inner::Diagonal { diag: m.diag().to_vec() } })
}

fn check_diag(d: &[f64]) -> Result<()> {
    match d.iter().position(|v| !(*v > 0.0)) {
        Some(index) => Err(Error::NonPositive { index, value: d[index] }),
        None => Ok(()),
    }
}

/// Zero fill-in incomplete Cholesky on the lower pattern of `M`.
pub fn build_zic(m: &NormalMatrix) -> Result<Preconditioner> {
    let factor = zic_factor(m.matrix())?;
    Ok(Preconditioner { kind: PrecondKind::Zic, inner: Inner::Zic { factor } })
}

/// Incomplete Cholesky of a symmetric matrix restricted to its own lower
/// pattern. A nonpositive pivot aborts with [`Error::ZicBreakdown`].
pub fn zic_factor(a: &CsrMatrix) -> Result<CsrMatrix> {
    let n = a.nrows();
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut cols: Vec<usize> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    row_offsets.push(0);
    for i in 0..n {
        let start = cols.len();
        let (acols, avals) = a.row(i);
        let mut has_diag = false;
        for (&j, &aij) in acols.iter().zip(avals) {
            if j > i {
                break;
            }
            // Sparse dot of the finished part of row i with row j, columns < j.
            let (jstart, jend) = if j == i { (start, cols.len()) } else { (row_offsets[j], row_offsets[j + 1]) };
            let mut s = 0.0;
            let (mut p, mut q) = (start, jstart);
            let pend = cols.len();
            while p < pend && q < jend {
                let (cp, cq) = (cols[p], cols[q]);
                if cp >= j || cq >= j {
                    break;
                }
                match cp.cmp(&cq) {
                    core::cmp::Ordering::Less => p += 1,
                    core::cmp::Ordering::Greater => q += 1,
                    core::cmp::Ordering::Equal => {
                        s += vals[p] * vals[q];
                        p += 1;
                        q += 1;
                    }
                }
            }
            if j == i {
                let pivot = aij - s;
                if !(pivot > 0.0) || !pivot.is_finite() {
                    return Err(Error::ZicBreakdown { row: i, pivot });
                }
                cols.push(i);
                vals.push(pivot.sqrt());
                has_diag = true;
            } else {
                let ljj = vals[row_offsets[j + 1] - 1];
                cols.push(j);
                vals.push((aij - s) / ljj);
            }
        }
        if !has_diag {
            return Err(Error::ZicBreakdown { row: i, pivot: 0.0 });
        }
        row_offsets.push(cols.len());
    }
    CsrMatrix::new(n, n, row_offsets, cols, vals, false)
}

fn zic_lower_solve(f: &CsrMatrix, x: &mut [f64]) {
    for i in 0..f.nrows() {
        let (cols, vals) = f.row(i);
        let last = cols.len() - 1;
        let mut acc = x[i];
        for k in 0..last {
            acc -= vals[k] * x[cols[k]];
        }
        x[i] = acc / vals[last];
    }
}

fn zic_upper_solve(f: &CsrMatrix, x: &mut [f64]) {
    for i in (0..f.nrows()).rev() {
        let (cols, vals) = f.row(i);
        let last = cols.len() - 1;
        x[i] /= vals[last];
        let xi = x[i];
        for k in 0..last {
            x[cols[k]] -= vals[k] * xi;
        }
    }
}

fn zic_upper_mul(f: &CsrMatrix, x: &[f64], y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..f.nrows() {
        let (cols, vals) = f.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            y[j] += v * x[i];
        }
    }
}

fn lower_solve(l: &CsrMatrix, d: &[f64], x: &mut [f64]) {
    for i in 0..d.len() {
        let (cols, vals) = l.row(i);
        let mut acc = x[i];
        for (&j, &v) in cols.iter().zip(vals) {
            acc -= v * x[j];
        }
        x[i] = acc / d[i];
    }
}

fn upper_solve(l: &CsrMatrix, d: &[f64], x: &mut [f64]) {
    for i in (0..d.len()).rev() {
        x[i] /= d[i];
        let xi = x[i];
        let (cols, vals) = l.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            x[j] -= v * xi;
        }
    }
}

fn lower_mul(l: &CsrMatrix, d: &[f64], x: &[f64], y: &mut [f64]) {
    for i in 0..d.len() {
        let (cols, vals) = l.row(i);
        let mut acc = d[i] * x[i];
        for (&j, &v) in cols.iter().zip(vals) {
            acc += v * x[j];
        }
        y[i] = acc;
    }
}

fn upper_mul(l: &CsrMatrix, d: &[f64], x: &[f64], y: &mut [f64]) {
    for i in 0..d.len() {
        y[i] = d[i] * x[i];
    }
    for i in 0..d.len() {
        let (cols, vals) = l.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            y[j] += v * x[i];
        }
    }
}

/// Pivoted Cholesky of `ZᵀWZ`; stops early once the largest remaining
/// diagonal falls below `1e-12` times the largest initial one.
pub fn pivoted_cholesky(m: &NormalMatrix, k: usize) -> (Vec<f64>, usize) {
    let n = m.dim();
    let k = k.min(n);
    let mut d: Vec<f64> = (0..n).map(|i| m.diag()[i] - m.sigma_inv()[i]).collect();
    let floor = 1e-12 * d.iter().cloned().fold(0.0, f64::max);
    let mut factor = Vec::with_capacity(n * k);
    let mut rank = 0;
    let mut col = vec![0.0; n];
    while rank < k {
        let (piv, &dmax) = d
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(core::cmp::Ordering::Equal))
            .expect("nonempty");
        if !(dmax > floor) || dmax <= 0.0 {
            break;
        }
        col.iter_mut().for_each(|v| *v = 0.0);
        let (cols, vals) = m.matrix().row(piv);
        for (&j, &v) in cols.iter().zip(vals) {
            col[j] = v;
        }
        col[piv] -= m.sigma_inv()[piv];
        for q in 0..rank {
            let prev = &factor[q * n..(q + 1) * n];
            let lp = prev[piv];
            if lp != 0.0 {
                for j in 0..n {
                    col[j] -= prev[j] * lp;
                }
            }
        }
        let s = dmax.sqrt();
        for j in 0..n {
            col[j] /= s;
        }
        col[piv] = s;
        for j in 0..n {
            d[j] -= col[j] * col[j];
        }
        d[piv] = 0.0;
        factor.extend_from_slice(&col);
        rank += 1;
    }
    (factor, rank)
}

pub fn build_pivchol(m: &NormalMatrix, k: usize) -> Result<Preconditioner> {
    let (factor, rank) = pivoted_cholesky(m, k);
    low_rank(PrecondKind::PivChol(k), m.sigma_inv(), factor, rank)
}

/// Rank-`k` approximation `ZᵀWZ ≈ Q V Λ Vᵀ Qᵀ` from a partial Lanczos run
/// with full reorthogonalization; negative Ritz values are dropped.
pub fn build_lanczos_lr(m: &NormalMatrix, k: usize, seed: u64) -> Result<Preconditioner> {
    let n = m.dim();
    let k = k.min(n);
    if k == 0 {
        return low_rank(PrecondKind::LanczosLr(0), m.sigma_inv(), Vec::new(), 0);
    }
    let start = normal_vec(&mut stream_rng(seed, Domain::Lanczos, 0), n);
    let op = ZtwzOperator(m);
    let lz = lanczos_partial(&op, &start, k)?;
    let r = lz.tridiag.dim();
    let eig = tridiag_eigen(&lz.tridiag.diag, &lz.tridiag.off)?;
    let mut factor = Vec::with_capacity(n * r);
    let mut rank = 0;
    let top = eig.values.iter().cloned().fold(0.0, f64::max);
    for j in (0..r).rev() {
        let lam = eig.values[j];
        if !(lam > 1e-12 * top) {
            continue;
        }
        let v = eig.vector(j);
        let s = lam.sqrt();
        let mut col = vec![0.0; n];
        for (q, &vq) in v.iter().enumerate() {
            let basis = lz.basis_column(q);
            for i in 0..n {
                col[i] += basis[i] * vq * s;
            }
        }
        factor.extend_from_slice(&col);
        rank += 1;
    }
    low_rank(PrecondKind::LanczosLr(k), m.sigma_inv(), factor, rank)
}

fn low_rank(kind: PrecondKind, sigma_inv: &[f64], factor: Vec<f64>, rank: usize) -> Result<Preconditioner> {
    let n = sigma_inv.len();
    check_diag(sigma_inv)?;
    let mut core = DMatrix::<f64>::identity(rank, rank);
    for a in 0..rank {
        let ca = &factor[a * n..(a + 1) * n];
        for b in 0..=a {
            let cb = &factor[b * n..(b + 1) * n];
            let v: f64 = (0..n).map(|i| ca[i] * cb[i] / sigma_inv[i]).sum();
            core[(a, b)] += v;
            if a != b {
                core[(b, a)] += v;
            }
        }
    }
    let chol = nalgebra::Cholesky::new(core)
        .ok_or(Error::NotPositiveDefinite { index: 0, pivot: f64::NAN })?;
    let l = chol.l();
    let core_logdet = 2.0 * (0..rank).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(Preconditioner {
        kind,
        inner: Inner::LowRank { sigma_inv: sigma_inv.to_vec(), factor, rank, core: l, core_logdet },
    })
}

fn solve_chol(l: &DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    let y = l.solve_lower_triangular(&b).expect("cholesky factor has a positive diagonal");
    l.tr_solve_lower_triangular(&y).expect("cholesky factor has a positive diagonal")
}
