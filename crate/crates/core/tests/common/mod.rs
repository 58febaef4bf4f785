#![allow(dead_code)]

use crossre_core::{
    simulate_dataset, DesignKind, Family, GroupedDesign, Incidence, ModelParams, NormalMatrix, NormalPattern, SimConfig,
    SimDataset,
};
use nalgebra::DMatrix;

/// Two randomly crossed factors with `m1` and `m2` levels, three covariates.
pub fn crossed(n: usize, m1: usize, m2: usize, family: Family, seed: u64) -> SimDataset {
    let cfg = SimConfig {
        n,
        levels: vec![m1, m2],
        re_variances: vec![0.25, 0.25],
        error_variance: 0.25,
        family,
        design: DesignKind::Random,
        n_covariates: 3,
        seed,
    };
    simulate_dataset(&cfg).unwrap()
}

pub fn balanced(n: usize, m1: usize, m2: usize, family: Family, seed: u64) -> SimDataset {
    let cfg = SimConfig {
        n,
        levels: vec![m1, m2],
        re_variances: vec![0.25, 0.25],
        error_variance: 0.25,
        family,
        design: DesignKind::Balanced,
        n_covariates: 0,
        seed,
    };
    simulate_dataset(&cfg).unwrap()
}

pub fn params_for(design: &GroupedDesign, family: Family, re: &[f64], s2: f64) -> ModelParams {
    let mut beta = vec![0.3; design.p];
    beta[0] = -0.2;
    ModelParams {
        re_variances: re.to_vec(),
        error_variance: (family == Family::Gaussian).then_some(s2),
        beta,
    }
}

pub fn dense_z(z: &Incidence) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(z.n_rows(), z.n_cols());
    for r in 0..z.n_rows() {
        for &c in z.row(r) {
            d[(r, c)] += 1.0;
        }
    }
    d
}

pub fn dense(m: &NormalMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.dim(), m.dim(), &m.to_dense())
}

pub fn assemble(z: &Incidence, w: &[f64], sinv: &[f64]) -> NormalMatrix {
    NormalPattern::new(z).assemble(w, sinv).unwrap()
}

pub fn dense_logdet(a: &DMatrix<f64>) -> f64 {
    let l = nalgebra::Cholesky::new(a.clone()).unwrap().l();
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}
