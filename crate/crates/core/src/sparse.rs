//! Sparse storage: compressed-sparse-row matrices, binary incidence matrices
//! built from categorical labels, and assembly of the normal matrix
//! `M = Σ⁻¹ + ZᵀWZ` together with its split `M = L + Lᵀ + D`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::SymOperator;

/// Compressed-sparse-row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl CsrMatrix {
    /// Builds a matrix from raw CSR arrays, validating the layout. When
    /// `symmetric` is set the matrix must be square and structurally and
    /// numerically symmetric.
    pub fn new(
        nrows: usize,
        ncols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
        symmetric: bool,
    ) -> Result<Self> {
        if row_offsets.len() != nrows + 1 {
            return Err(Error::DimensionMismatch { expected: nrows + 1, found: row_offsets.len() });
        }
        if col_indices.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: col_indices.len(), found: values.len() });
        }
        if row_offsets[0] != 0 || row_offsets[nrows] != col_indices.len() {
            return Err(Error::InvalidInput("row offsets do not span the column index array".into()));
        }
        for i in 0..nrows {
            if row_offsets[i] > row_offsets[i + 1] {
                return Err(Error::InvalidInput(format!("row offsets decrease at row {i}")));
            }
            let cols = &col_indices[row_offsets[i]..row_offsets[i + 1]];
            for w in cols.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::InvalidInput(format!("columns of row {i} are not strictly increasing")));
                }
            }
            if let Some(&last) = cols.last() {
                if last >= ncols {
                    return Err(Error::InvalidInput(format!("column {last} out of range in row {i}")));
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse matrix values"));
        }
        let mat = Self { nrows, ncols, row_offsets, col_indices, values, symmetric };
        if symmetric {
            if nrows != ncols {
                return Err(Error::DimensionMismatch { expected: nrows, found: ncols });
            }
            for i in 0..nrows {
                let (cols, vals) = mat.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    match mat.find(j, i) {
                        Some(idx) if mat.values[idx] == v => {}
                        _ => {
                            return Err(Error::InvalidInput(format!(
                                "entry ({i}, {j}) has no matching symmetric partner"
                            )))
                        }
                    }
                }
            }
        }
        Ok(mat)
    }

    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
        symmetric: bool,
    ) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(i, j, _) in &sorted {
            if i >= nrows || j >= ncols {
                return Err(Error::InvalidInput(format!("triplet ({i}, {j}) out of range")));
            }
        }
        sorted.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0usize; nrows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            if last == Some((i, j)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
            } else {
                col_indices.push(j);
                values.push(v);
                row_offsets[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..nrows {
            row_offsets[i + 1] += row_offsets[i];
        }
        Self::new(nrows, ncols, row_offsets, col_indices, values, symmetric)
    }

    /// Dense row-major input; exact zeros are dropped.
    pub fn from_dense(nrows: usize, ncols: usize, data: &[f64], symmetric: bool) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::DimensionMismatch { expected: nrows * ncols, found: data.len() });
        }
        let mut triplets = Vec::new();
        for i in 0..nrows {
            for j in 0..ncols {
                let v = data[i * ncols + j];
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(nrows, ncols, &triplets, symmetric)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
            symmetric: true,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[r.clone()], &self.values[r])
    }

    fn find(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_offsets[i];
        let (cols, _) = self.row(i);
        cols.binary_search(&j).ok().map(|p| start + p)
    }

    /// Entry `(i, j)`, zero when structurally absent.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.find(i, j).map_or(0.0, |idx| self.values[idx])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ncols {
            return Err(Error::DimensionMismatch { expected: self.ncols, found: x.len() });
        }
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    /// `y = A x` without dimension checks beyond debug assertions. Each row is
    /// reduced left to right, so the result is deterministic.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let r = self.row_offsets[i]..self.row_offsets[i + 1];
            let mut acc = 0.0;
            for (c, v) in self.col_indices[r.clone()].iter().zip(&self.values[r]) {
                acc += v * x[*c];
            }
            *yi = acc;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows * self.ncols];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[i * self.ncols + j] = v;
            }
        }
        out
    }
}

impl SymOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec_into(x, y)
    }
}

/// Binary incidence matrix `Z = (Z_1, …, Z_K)`: every row has exactly one
/// unit entry per grouping factor. Column indices are global, with factor `k`
/// occupying `factor_range(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Incidence {
    n_rows: usize,
    factor_offsets: Vec<usize>,
    cols: Vec<usize>,
}

impl Incidence {
    /// `indices[k][r]` is the local level of row `r` in factor `k`.
    pub fn from_level_indices(level_counts: &[usize], indices: &[Vec<usize>]) -> Result<Self> {
        let k = level_counts.len();
        if k == 0 || indices.len() != k {
            return Err(Error::InvalidInput("need one index column per factor and at least one factor".into()));
        }
        let n = indices[0].len();
        if n == 0 {
            return Err(Error::InvalidInput("incidence matrix needs at least one row".into()));
        }
        let mut factor_offsets = Vec::with_capacity(k + 1);
        factor_offsets.push(0);
        for &c in level_counts {
            if c == 0 {
                return Err(Error::EmptyFactor { factor: factor_offsets.len() - 1 });
            }
            factor_offsets.push(factor_offsets.last().unwrap() + c);
        }
        let mut cols = vec![0usize; n * k];
        for (f, column) in indices.iter().enumerate() {
            if column.len() != n {
                return Err(Error::DimensionMismatch { expected: n, found: column.len() });
            }
            for (r, &lvl) in column.iter().enumerate() {
                if lvl >= level_counts[f] {
                    return Err(Error::InvalidInput(format!(
                        "level {lvl} out of range for factor {f} with {} levels",
                        level_counts[f]
                    )));
                }
                cols[r * k + f] = factor_offsets[f] + lvl;
            }
        }
        Ok(Self { n_rows: n, factor_offsets, cols })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Total number of levels `m = Σ m_k`.
    pub fn n_cols(&self) -> usize {
        *self.factor_offsets.last().unwrap()
    }

    pub fn n_factors(&self) -> usize {
        self.factor_offsets.len() - 1
    }

    pub fn factor_range(&self, k: usize) -> Range<usize> {
        self.factor_offsets[k]..self.factor_offsets[k + 1]
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.factor_offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Factor that owns global column `col`.
    pub fn factor_of(&self, col: usize) -> usize {
        match self.factor_offsets.binary_search(&col) {
            Ok(pos) => pos,
            Err(pos) => pos - 1,
        }
    }

    /// Global column indices of row `r`, one per factor in factor order.
    #[inline]
    pub fn row(&self, r: usize) -> &[usize] {
        let k = self.n_factors();
        &self.cols[r * k..(r + 1) * k]
    }

    /// Restriction to a subset of rows.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let k = self.n_factors();
        let mut cols = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            cols.extend_from_slice(self.row(r));
        }
        Self { n_rows: rows.len(), factor_offsets: self.factor_offsets.clone(), cols }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_cols() {
            return Err(Error::DimensionMismatch { expected: self.n_cols(), found: x.len() });
        }
        let mut y = vec![0.0; self.n_rows];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    /// `y = Z x`
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        let k = self.n_factors();
        for (r, yr) in y.iter_mut().enumerate() {
            *yr = self.cols[r * k..(r + 1) * k].iter().map(|&c| x[c]).sum();
        }
    }

    pub fn t_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.n_rows {
            return Err(Error::DimensionMismatch { expected: self.n_rows, found: y.len() });
        }
        let mut x = vec![0.0; self.n_cols()];
        self.t_matvec_into(y, &mut x);
        Ok(x)
    }

    /// `x = Zᵀ y`
    pub fn t_matvec_into(&self, y: &[f64], x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = 0.0);
        let k = self.n_factors();
        for (r, &yr) in y.iter().enumerate() {
            for &c in &self.cols[r * k..(r + 1) * k] {
                x[c] += yr;
            }
        }
    }

    /// Occurrence count of every level, `Zᵀ 1`.
    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_cols()];
        for &c in &self.cols {
            counts[c] += 1;
        }
        counts
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let k = self.n_factors();
        let mut row_offsets = Vec::with_capacity(self.n_rows + 1);
        let mut col_indices = Vec::with_capacity(self.cols.len());
        row_offsets.push(0);
        for r in 0..self.n_rows {
            let mut row: Vec<usize> = self.row(r).to_vec();
            row.sort_unstable();
            col_indices.extend_from_slice(&row);
            row_offsets.push(row_offsets.last().unwrap() + k);
        }
        CsrMatrix {
            nrows: self.n_rows,
            ncols: self.n_cols(),
            row_offsets,
            col_indices,
            values: vec![1.0; self.cols.len()],
            symmetric: false,
        }
    }
}

/// Label dictionary of one grouping factor; indices follow first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelDictionary {
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LevelDictionary {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn intern(&mut self, label: &str) -> usize {
        if let Some(&i) = self.index.get(label) {
            return i;
        }
        let i = self.labels.len();
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), i);
        i
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut dict = Self::default();
        for l in labels {
            dict.intern(l.as_ref());
        }
        dict
    }
}

/// Random-effects structure: one level dictionary per grouping factor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReStructure {
    pub factors: Vec<LevelDictionary>,
}

impl ReStructure {
    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.factors.iter().map(LevelDictionary::len).collect()
    }

    pub fn total_levels(&self) -> usize {
        self.factors.iter().map(LevelDictionary::len).sum()
    }
}

/// Builds `Z` from per-factor categorical label columns.
pub fn build_incidence<C, S>(labels: &[C], n: usize) -> Result<(Incidence, ReStructure)>
where
    C: AsRef<[S]>,
    S: AsRef<str>,
{
    if n == 0 {
        return Err(Error::InvalidInput("no observations".into()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("at least one grouping factor is required".into()));
    }
    let mut structure = ReStructure::default();
    let mut indices = Vec::with_capacity(labels.len());
    for (f, column) in labels.iter().enumerate() {
        let column = column.as_ref();
        if column.is_empty() {
            return Err(Error::EmptyFactor { factor: f });
        }
        if column.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: column.len() });
        }
        let mut dict = LevelDictionary::default();
        let idx: Vec<usize> = column.iter().map(|l| dict.intern(l.as_ref())).collect();
        indices.push(idx);
        structure.factors.push(dict);
    }
    let z = Incidence::from_level_indices(&structure.level_counts(), &indices)?;
    Ok((z, structure))
}

/// Sparsity structure of `ZᵀWZ + Σ⁻¹` for a fixed incidence matrix, with the
/// value slots each observation contributes to. Reassembly for new `W` or
/// `Σ⁻¹` only touches values.
#[derive(Debug, Clone)]
pub struct NormalPattern {
    m: usize,
    k: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    diag_slots: Vec<usize>,
    obs_slots: Vec<usize>,
    lower_offsets: Vec<usize>,
    lower_cols: Vec<usize>,
    lower_slots: Vec<usize>,
}

impl NormalPattern {
    pub fn new(z: &Incidence) -> Self {
        let m = z.n_cols();
        let k = z.n_factors();
        let n = z.n_rows();
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n * k * (k - 1) + m);
        pairs.extend((0..m).map(|i| (i, i)));
        for r in 0..n {
            let row = z.row(r);
            for a in 0..k {
                for b in 0..k {
                    if a != b {
                        pairs.push((row[a], row[b]));
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut row_offsets = vec![0usize; m + 1];
        let mut col_indices = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            row_offsets[i + 1] += 1;
            col_indices.push(j);
        }
        for i in 0..m {
            row_offsets[i + 1] += row_offsets[i];
        }
        let slot = |i: usize, j: usize| -> usize {
            let r = &col_indices[row_offsets[i]..row_offsets[i + 1]];
            row_offsets[i] + r.binary_search(&j).expect("pattern contains every observed pair")
        };
        let diag_slots: Vec<usize> = (0..m).map(|i| slot(i, i)).collect();
        let mut obs_slots = Vec::with_capacity(n * k * k);
        for r in 0..n {
            let row = z.row(r);
            for a in 0..k {
                for b in 0..k {
                    obs_slots.push(slot(row[a], row[b]));
                }
            }
        }
        let mut lower_offsets = Vec::with_capacity(m + 1);
        let mut lower_cols = Vec::new();
        let mut lower_slots = Vec::new();
        lower_offsets.push(0);
        for i in 0..m {
            for p in row_offsets[i]..row_offsets[i + 1] {
                let j = col_indices[p];
                if j < i {
                    lower_cols.push(j);
                    lower_slots.push(p);
                }
            }
            lower_offsets.push(lower_cols.len());
        }
        Self { m, k, row_offsets, col_indices, diag_slots, obs_slots, lower_offsets, lower_cols, lower_slots }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    /// Values of `ZᵀWZ` on this pattern.
    fn ztwz_values(&self, w: &[f64]) -> Vec<f64> {
        let kk = self.k * self.k;
        let mut values = vec![0.0; self.col_indices.len()];
        for (r, &wr) in w.iter().enumerate() {
            for &s in &self.obs_slots[r * kk..(r + 1) * kk] {
                values[s] += wr;
            }
        }
        values
    }

    /// Assembles `M = Σ⁻¹ + ZᵀWZ` with cached `D` and strict lower `L`.
    pub fn assemble(&self, w: &[f64], sigma_inv: &[f64]) -> Result<NormalMatrix> {
        let n = self.obs_slots.len() / (self.k * self.k);
        if w.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: w.len() });
        }
        if sigma_inv.len() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, found: sigma_inv.len() });
        }
        for (index, &value) in sigma_inv.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositive { index, value });
            }
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let mut values = self.ztwz_values(w);
        for (i, &s) in self.diag_slots.iter().enumerate() {
            values[s] += sigma_inv[i];
        }
        let diag: Vec<f64> = self.diag_slots.iter().map(|&s| values[s]).collect();
        let lower_vals: Vec<f64> = self.lower_slots.iter().map(|&s| values[s]).collect();
        let matrix = CsrMatrix {
            nrows: self.m,
            ncols: self.m,
            row_offsets: self.row_offsets.clone(),
            col_indices: self.col_indices.clone(),
            values,
            symmetric: true,
        };
        let lower = CsrMatrix {
            nrows: self.m,
            ncols: self.m,
            row_offsets: self.lower_offsets.clone(),
            col_indices: self.lower_cols.clone(),
            values: lower_vals,
            symmetric: false,
        };
        Ok(NormalMatrix { matrix, diag, lower, sigma_inv: sigma_inv.to_vec() })
    }
}

/// The symmetric positive definite matrix `M = Σ⁻¹ + ZᵀWZ`.
#[derive(Debug, Clone)]
pub struct NormalMatrix {
    matrix: CsrMatrix,
    diag: Vec<f64>,
    lower: CsrMatrix,
    sigma_inv: Vec<f64>,
}

/// One-shot assembly; prefer reusing a [`NormalPattern`] across evaluations.
pub fn assemble_normal_matrix(z: &Incidence, w: &[f64], sigma_inv: &[f64]) -> Result<NormalMatrix> {
    NormalPattern::new(z).assemble(w, sigma_inv)
}

impl NormalMatrix {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// `D = diag(M)`
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    /// Strict lower triangle `L`.
    pub fn lower(&self) -> &CsrMatrix {
        &self.lower
    }

    pub fn sigma_inv(&self) -> &[f64] {
        &self.sigma_inv
    }

    /// `y = ZᵀWZ x = M x − Σ⁻¹ x`
    pub fn ztwz_apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.matvec_into(x, y);
        for ((yi, xi), si) in y.iter_mut().zip(x).zip(&self.sigma_inv) {
            *yi -= si * xi;
        }
    }

    /// Entry `(i, j)` of `ZᵀWZ`.
    pub fn ztwz_get(&self, i: usize, j: usize) -> f64 {
        let v = self.matrix.get(i, j);
        if i == j {
            v - self.sigma_inv[i]
        } else {
            v
        }
    }

    /// Solves `(L + D) x = b` in place.
    pub fn solve_lower_in_place(&self, x: &mut [f64]) {
        for i in 0..self.dim() {
            let (cols, vals) = self.lower.row(i);
            let mut acc = x[i];
            for (&j, &v) in cols.iter().zip(vals) {
                acc -= v * x[j];
            }
            x[i] = acc / self.diag[i];
        }
    }

    /// Solves `(L + D)ᵀ x = b` in place.
    pub fn solve_upper_in_place(&self, x: &mut [f64]) {
        for i in (0..self.dim()).rev() {
            x[i] /= self.diag[i];
            let xi = x[i];
            let (cols, vals) = self.lower.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                x[j] -= v * xi;
            }
        }
    }

    /// `y = (L + D) x`
    pub fn mul_lower(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.dim() {
            let (cols, vals) = self.lower.row(i);
            let mut acc = self.diag[i] * x[i];
            for (&j, &v) in cols.iter().zip(vals) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
    }

    /// `y = (L + D)ᵀ x`
    pub fn mul_upper(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.dim() {
            y[i] = self.diag[i] * x[i];
        }
        for i in 0..self.dim() {
            let (cols, vals) = self.lower.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * x[i];
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        self.matrix.to_dense()
    }
}

impl SymOperator for NormalMatrix {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.matvec_into(x, y)
    }
}

/// `ZᵀWZ` as an operator, for low-rank approximations.
pub struct ZtwzOperator<'a>(pub &'a NormalMatrix);

impl SymOperator for ZtwzOperator<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.0.ztwz_apply(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dense_ztwz_plus(z: &Incidence, w: &[f64], sigma_inv: &[f64]) -> Vec<f64> {
        let m = z.n_cols();
        let mut out = vec![0.0; m * m];
        for r in 0..z.n_rows() {
            for &a in z.row(r) {
                for &b in z.row(r) {
                    out[a * m + b] += w[r];
                }
            }
        }
        for i in 0..m {
            out[i * m + i] += sigma_inv[i];
        }
        out
    }

    #[test]
    fn incidence_single_factor() {
        let (z, s) = build_incidence(&[vec!["a", "a", "b"]], 3).unwrap();
        assert_eq!(s.level_counts(), vec![2]);
        let dense = z.to_csr().to_dense();
        assert_eq!(dense, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn incidence_two_factors() {
        let (z, s) = build_incidence(&[vec!["a", "b"], vec!["x", "y"]], 2).unwrap();
        assert_eq!(z.n_cols(), 4);
        assert_eq!(s.total_levels(), 4);
        for r in 0..2 {
            assert_eq!(z.row(r).len(), 2);
        }
        assert_eq!(z.row(1), &[1, 3]);
    }

    #[test]
    fn incidence_errors() {
        let empty: Vec<Vec<&str>> = vec![vec![]];
        assert!(matches!(build_incidence(&empty, 0), Err(Error::InvalidInput(_))));
        assert!(matches!(build_incidence(&empty, 2), Err(Error::EmptyFactor { factor: 0 })));
        assert!(build_incidence(&[vec!["a"], vec!["x", "y"]], 2).is_err());
    }

    #[test]
    fn first_appearance_order() {
        let (_, s) = build_incidence(&[vec!["q", "b", "q", "a"]], 4).unwrap();
        assert_eq!(s.factors[0].labels(), &["q", "b", "a"]);
        assert_eq!(s.factors[0].get("a"), Some(2));
    }

    #[test]
    fn balanced_column_sums() {
        // m_1 = m_2 = 4, d = 10: each level appears exactly ten times.
        let n = 40;
        let f1: Vec<usize> = (0..n).map(|r| r % 4).collect();
        let f2: Vec<usize> = (0..n).map(|r| (r / 4 + r) % 4).collect();
        let z = Incidence::from_level_indices(&[4, 4], &[f1, f2]).unwrap();
        assert!(z.column_counts().iter().all(|&c| c == 10));
        let ones = vec![1.0; n];
        assert!(z.t_matvec(&ones).unwrap().iter().all(|&c| c == 10.0));
    }

    #[test]
    fn matvec_small_cases() {
        let id = CsrMatrix::identity(3);
        assert_eq!(id.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let a = CsrMatrix::from_dense(2, 2, &[2.0, 1.0, 1.0, 2.0], true).unwrap();
        assert_eq!(a.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 3.0]);
        assert!(matches!(a.matvec(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rejects_asymmetric_input() {
        assert!(CsrMatrix::from_dense(2, 2, &[2.0, 1.0, 0.5, 2.0], true).is_err());
    }

    #[test]
    fn zero_weights_give_sigma_inverse() {
        let z = Incidence::from_level_indices(&[2, 2], &[vec![0, 1, 1], vec![1, 0, 1]]).unwrap();
        let m = assemble_normal_matrix(&z, &[0.0; 3], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let dense = m.to_dense();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { [1.0, 2.0, 3.0, 4.0][i] } else { 0.0 };
                assert_eq!(dense[i * 4 + j], expect);
            }
        }
    }

    #[test]
    fn two_observations_same_levels() {
        // Both observations share level 0 of each factor; second levels unused.
        let z = Incidence::from_level_indices(&[2, 2], &[vec![0, 0], vec![0, 0]]).unwrap();
        let m = assemble_normal_matrix(&z, &[1.0, 1.0], &[1.0; 4]).unwrap();
        assert_eq!(m.matrix().get(0, 0), 3.0);
        assert_eq!(m.matrix().get(2, 2), 3.0);
        assert_eq!(m.matrix().get(0, 2), 2.0);
        assert_eq!(m.matrix().get(2, 0), 2.0);
        assert_eq!(m.matrix().get(1, 1), 1.0);
    }

    #[test]
    fn balanced_gaussian_diagonal() {
        let n = 40;
        let f1: Vec<usize> = (0..n).map(|r| r % 4).collect();
        let f2: Vec<usize> = (0..n).map(|r| (r / 4 + r) % 4).collect();
        let z = Incidence::from_level_indices(&[4, 4], &[f1, f2]).unwrap();
        let m = assemble_normal_matrix(&z, &vec![4.0; n], &[4.0; 8]).unwrap();
        assert!(m.diag().iter().all(|&d| (d - 44.0).abs() < 1e-12));
    }

    #[test]
    fn nonpositive_sigma_inverse_rejected() {
        let z = Incidence::from_level_indices(&[1], &[vec![0]]).unwrap();
        assert!(matches!(
            assemble_normal_matrix(&z, &[1.0], &[0.0]),
            Err(Error::NonPositive { index: 0, .. })
        ));
    }

    #[test]
    fn split_reconstructs_dense_matrix() {
        let z = Incidence::from_level_indices(
            &[3, 2, 2],
            &[vec![0, 1, 2, 0, 1], vec![0, 1, 1, 0, 0], vec![1, 1, 0, 0, 1]],
        )
        .unwrap();
        let w = [0.3, 1.2, 0.7, 2.0, 0.1];
        let s = [1.5, 2.0, 0.5, 1.0, 3.0, 2.5, 0.2];
        let m = assemble_normal_matrix(&z, &w, &s).unwrap();
        let dense = dense_ztwz_plus(&z, &w, &s);
        let dim = z.n_cols();
        let l = m.lower().to_dense();
        for i in 0..dim {
            for j in 0..dim {
                let rebuilt = l[i * dim + j] + l[j * dim + i] + if i == j { m.diag()[i] } else { 0.0 };
                assert!((rebuilt - dense[i * dim + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triangular_solves_invert_products() {
        let z = Incidence::from_level_indices(&[3, 2], &[vec![0, 1, 2, 0], vec![0, 1, 1, 0]]).unwrap();
        let m = assemble_normal_matrix(&z, &[1.0, 2.0, 0.5, 1.5], &[1.0; 5]).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5, 1.1];
        let mut y = vec![0.0; 5];
        m.mul_lower(&x, &mut y);
        m.solve_lower_in_place(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        m.mul_upper(&x, &mut y);
        m.solve_upper_in_place(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
