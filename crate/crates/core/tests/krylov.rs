mod common;

use common::*;
use crossre_core::krylov::{
    combine_control_variate, lanczos_partial, pcg_solve, slq_logdet, ste_fisher_information, ste_logdet_grad_mode,
    ste_logdet_grad_theta,
};
use crossre_core::oracle::chol_fisher;
use crossre_core::probes::{Domain, ProbeKind, ProbeSet};
use crossre_core::spectral::{preconditioned_matrix, slq_requirement};
use crossre_core::{CgConfig, CsrMatrix, Family, Incidence, ModelParams, NormalMatrix, PrecondKind, Preconditioner};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sorted_eigenvalues(a: DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn gaussian_normal_matrix(n: usize, m1: usize, m2: usize, seed: u64) -> (Incidence, NormalMatrix) {
    let ds = crossed(n, m1, m2, Family::Gaussian, seed);
    let z = ds.design.z.clone();
    let sinv = ModelParams { re_variances: vec![0.25, 0.25], error_variance: Some(0.25), beta: vec![] }.sigma_inv(&z);
    let m = assemble(&z, &vec![4.0; n], &sinv);
    (z, m)
}

const TIGHT: CgConfig = CgConfig { tol: 1e-12, max_iter: 5000 };

#[test]
fn captured_tridiagonal_reproduces_preconditioned_spectrum() {
    let (_, m) = gaussian_normal_matrix(60, 6, 5, 1);
    for kind in [PrecondKind::Ssor, PrecondKind::Diagonal, PrecondKind::Zic] {
        let p = Preconditioner::build(kind, &m, 1).unwrap();
        let b: Vec<f64> = (0..m.dim()).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        let res = pcg_solve(&m, &p, &b, CgConfig { tol: 1e-14, max_iter: m.dim() }, true).unwrap();
        let t = res.tridiag.unwrap();
        let got = sorted_eigenvalues(DMatrix::from_row_slice(t.dim(), t.dim(), &t.to_dense()));
        let want = sorted_eigenvalues(preconditioned_matrix(&m, &p).unwrap());
        // Repeated eigenvalues (all of the first block under SSOR) end CG early.
        for a in &got {
            let d = want.iter().map(|b| (a - b).abs()).fold(f64::INFINITY, f64::min);
            assert!(d < 1e-8 * a.abs().max(1.0), "{kind:?}: Ritz value {a} off by {d}");
        }
        assert!((got[0] - want[0]).abs() < 1e-8 && (got[got.len() - 1] - want[want.len() - 1]).abs() < 1e-8);
    }
}

#[test]
fn cg_terminates_after_distinct_eigenvalue_count() {
    // Q diag(1,1,…,2,…,5) Qᵀ with three distinct eigenvalues.
    let n = 30;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    let q = g.qr().q();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |i, _| [1.0, 2.0, 5.0][i % 3]));
    let a = &q * d * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let csr = CsrMatrix::from_dense(n, n, a.transpose().as_slice(), true).unwrap();
    let none = identity_precond(n);
    let res = pcg_solve(&csr, &none, &vec![1.0; n], CgConfig { tol: 1e-10, max_iter: 100 }, false).unwrap();
    assert!(res.converged && res.iterations <= 3, "{}", res.iterations);
}

fn identity_precond(n: usize) -> Preconditioner {
    let z = Incidence::from_level_indices(&[n], &[(0..n).collect()]).unwrap();
    let m = assemble(&z, &vec![0.0; n], &vec![1.0; n]);
    Preconditioner::build(PrecondKind::None, &m, 0).unwrap()
}

#[test]
fn full_lanczos_reproduces_spectrum() {
    let (_, m) = gaussian_normal_matrix(60, 10, 10, 2);
    let q0: Vec<f64> = (0..m.dim()).map(|i| 1.0 + i as f64).collect();
    let res = lanczos_partial(&m, &q0, m.dim()).unwrap();
    let t = &res.tridiag;
    let got = sorted_eigenvalues(DMatrix::from_row_slice(t.dim(), t.dim(), &t.to_dense()));
    let want = sorted_eigenvalues(dense(&m));
    assert_eq!(got.len(), want.len());
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn lanczos_basis_stays_orthonormal_on_ill_conditioned_operator() {
    let n = 200;
    let diag: Vec<f64> = (0..n).map(|i| 10f64.powf(-6.0 + 12.0 * i as f64 / (n - 1) as f64)).collect();
    let mut dense_a = vec![0.0; n * n];
    for i in 0..n {
        dense_a[i * n + i] = diag[i];
        if i + 1 < n {
            dense_a[i * n + i + 1] = 1e-3;
            dense_a[(i + 1) * n + i] = 1e-3;
        }
    }
    let a = CsrMatrix::from_dense(n, n, &dense_a, true).unwrap();
    let res = lanczos_partial(&a, &vec![1.0; n], 120).unwrap();
    let k = res.rank();
    let mut defect: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d: f64 = res.basis_column(i).iter().zip(res.basis_column(j)).map(|(a, b)| a * b).sum();
            defect = defect.max((d - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    assert!(defect <= 1e-10, "{defect}");
}

#[test]
fn slq_is_within_three_standard_errors_of_dense_logdet() {
    let (_, m) = gaussian_normal_matrix(2000, 100, 100, 4);
    let exact = dense_logdet(&dense(&m));
    let p = Preconditioner::build(PrecondKind::Ssor, &m, 0).unwrap();
    let probes = ProbeSet::new(50, ProbeKind::GaussianP, 7, Domain::LogDet);
    let est = slq_logdet(&m, &p, &probes, TIGHT).unwrap();
    assert!((est.value - exact).abs() <= 3.0 * est.std_error(), "{} vs {exact} ± {}", est.value, est.std_error());
}

#[test]
fn slq_mean_over_reseeds_is_unbiased() {
    let (_, m) = gaussian_normal_matrix(1500, 80, 70, 5);
    let exact = dense_logdet(&dense(&m));
    let p = Preconditioner::build(PrecondKind::Diagonal, &m, 0).unwrap();
    let vals: Vec<f64> = (0..200)
        .map(|s| slq_logdet(&m, &p, &ProbeSet::new(10, ProbeKind::GaussianP, s, Domain::LogDet), TIGHT).unwrap().value)
        .collect();
    let (mean, sd) = mean_sd(&vals);
    assert!((mean - exact).abs() <= 3.0 * sd / (vals.len() as f64).sqrt(), "{mean} vs {exact}");
}

#[test]
fn ssor_slq_varies_less_than_diagonal() {
    let (_, m) = gaussian_normal_matrix(2000, 100, 100, 6);
    let sd_of = |kind| {
        let p = Preconditioner::build(kind, &m, 0).unwrap();
        let v: Vec<f64> = (0..30)
            .map(|s| {
                slq_logdet(&m, &p, &ProbeSet::new(50, ProbeKind::GaussianP, s, Domain::LogDet), CgConfig::default())
                    .unwrap()
                    .value
            })
            .collect();
        mean_sd(&v).1
    };
    let (ssor, diag) = (sd_of(PrecondKind::Ssor), sd_of(PrecondKind::Diagonal));
    assert!(ssor < diag, "{ssor} vs {diag}");
}

#[test]
fn slq_error_obeys_the_probe_and_step_requirement() {
    let (_, m) = gaussian_normal_matrix(200, 15, 15, 7);
    let p = Preconditioner::build(PrecondKind::Ssor, &m, 0).unwrap();
    let a = preconditioned_matrix(&m, &p).unwrap();
    let ev = sorted_eigenvalues(a.clone());
    let kappa = ev[ev.len() - 1] / ev[0];
    let target: f64 = ev.iter().map(|v| v.ln()).sum();
    let (eps, eta) = (0.1, 0.1);
    let dim = m.dim();
    let mut t = 1;
    let req = loop {
        let r = slq_requirement(kappa, dim, t, eps, eta).unwrap();
        if r.probes <= t as f64 {
            break r;
        }
        t = r.probes.ceil() as usize;
    };
    let steps = (req.steps.ceil() as usize).max(1);
    let probes = ProbeSet::new(t, ProbeKind::GaussianP, 11, Domain::LogDet);
    let est = slq_logdet(&m, &p, &probes, CgConfig { tol: 1e-300, max_iter: steps }).unwrap();
    let gamma = est.value - est.logdet_p;
    assert!((gamma - target).abs() <= eps * dim as f64, "{gamma} vs {target}");
}

#[test]
fn theta_trace_estimate_converges_to_dense_trace() {
    let (z, m) = gaussian_normal_matrix(1000, 50, 50, 8);
    let inv = dense(&m).try_inverse().unwrap();
    let p = Preconditioner::build(PrecondKind::Ssor, &m, 0).unwrap();
    let est = slq_logdet(&m, &p, &ProbeSet::new(2000, ProbeKind::GaussianP, 3, Domain::LogDet), TIGHT).unwrap();
    let blocks: Vec<_> = (0..2).map(|k| z.factor_range(k)).collect();
    let term = ste_logdet_grad_theta(&m, &p, &est.solves, &blocks);
    for (k, blk) in blocks.iter().enumerate() {
        let exact: f64 = blk.clone().map(|j| -m.sigma_inv()[j] * inv[(j, j)]).sum();
        assert!((term.estimate[k] - exact).abs() <= 3.0 * term.std_error[k], "{k}: {} vs {exact}", term.estimate[k]);
    }
}

#[test]
fn theta_trace_without_observation_weight_is_minus_block_size() {
    let (z, _) = gaussian_normal_matrix(300, 20, 15, 9);
    let sinv = vec![3.0; z.n_cols()];
    let m = assemble(&z, &vec![0.0; 300], &sinv);
    let p = Preconditioner::build(PrecondKind::Ssor, &m, 0).unwrap();
    let est = slq_logdet(&m, &p, &ProbeSet::new(20, ProbeKind::GaussianP, 1, Domain::LogDet), TIGHT).unwrap();
    let blocks: Vec<_> = (0..2).map(|k| z.factor_range(k)).collect();
    let term = ste_logdet_grad_theta(&m, &p, &est.solves, &blocks);
    for (k, blk) in blocks.iter().enumerate() {
        assert!((term.estimate[k] + blk.len() as f64).abs() < 1e-9, "{}", term.estimate[k]);
    }
}

#[test]
fn control_variate_reduces_theta_trace_variance() {
    let (z, m) = gaussian_normal_matrix(2000, 100, 100, 10);
    let p = Preconditioner::build(PrecondKind::Ssor, &m, 0).unwrap();
    let blocks: Vec<_> = (0..2).map(|k| z.factor_range(k)).collect();
    let sinv = m.sigma_inv().to_vec();
    let mut wins = 0;
    for s in 0..50 {
        let est = slq_logdet(&m, &p, &ProbeSet::new(50, ProbeKind::GaussianP, s, Domain::LogDet), TIGHT).unwrap();
        let with_cv = ste_logdet_grad_theta(&m, &p, &est.solves, &blocks);
        let plain: Vec<Vec<f64>> = (0..est.solves.count())
            .map(|i| {
                blocks
                    .iter()
                    .map(|b| b.clone().map(|j| -sinv[j] * est.solves.minv_z[i][j] * est.solves.pinv_z[i][j]).sum())
                    .collect()
            })
            .collect();
        let without = combine_control_variate(&plain, None);
        if with_cv.std_error[0] < without.std_error[0] {
            wins += 1;
        }
    }
    assert!(wins >= 40, "{wins} of 50");
}

#[test]
fn mode_trace_estimate_converges_to_dense_trace() {
    let ds = crossed(600, 30, 30, Family::Bernoulli, 12);
    let z = &ds.design.z;
    let mu: Vec<f64> = (0..600).map(|i| ((i as f64) * 0.7).sin()).collect();
    let s: Vec<f64> = mu.iter().map(|m| crossre_core::likelihood::sigmoid(*m)).collect();
    let w: Vec<f64> = s.iter().map(|p| p * (1.0 - p)).collect();
    let d3: Vec<f64> = s.iter().map(|p| -p * (1.0 - p) * (1.0 - 2.0 * p)).collect();
    let m = assemble(z, &w, &vec![2.0; z.n_cols()]);
    let inv = dense(&m).try_inverse().unwrap();
    let p = Preconditioner::build(PrecondKind::Ssor, &m, 0).unwrap();
    let est = slq_logdet(&m, &p, &ProbeSet::new(2000, ProbeKind::GaussianP, 5, Domain::LogDet), TIGHT).unwrap();
    let term = ste_logdet_grad_mode(&m, &p, &est.solves, z, &d3);
    let mut inside = 0;
    for i in 0..600 {
        let cols = z.row(i);
        let exact: f64 = -d3[i] * cols.iter().flat_map(|&a| cols.iter().map(move |&b| (a, b))).map(|(a, b)| inv[(a, b)]).sum::<f64>();
        if (term.estimate[i] - exact).abs() <= 3.0 * term.std_error[i] + 1e-12 {
            inside += 1;
        }
    }
    assert!(inside >= 588, "{inside} of 600 within 3 SE");
}

#[test]
fn fisher_estimate_matches_scalar_closed_form() {
    let n = 400;
    let z = Incidence::from_level_indices(&[n], &[(0..n).collect()]).unwrap();
    let (s1, s2) = (0.6, 0.4);
    let m = assemble(&z, &vec![1.0 / s2; n], &vec![1.0 / s1; n]);
    let p = Preconditioner::build(PrecondKind::Ssor, &m, 0).unwrap();
    let probes = ProbeSet::new(500, ProbeKind::GaussianI, 2, Domain::Fisher);
    let est = ste_fisher_information(&z, &m, &p, &vec![1.0 / s2; n], &probes, TIGHT, false).unwrap();
    let exact = 0.5 * n as f64 / (s1 + s2).powi(2);
    assert!((est.matrix[0] - exact).abs() <= 3.0 * est.std_error[0], "{} vs {exact}", est.matrix[0]);
}

#[test]
fn fisher_estimate_matches_dense_information() {
    let ds = crossed(500, 25, 25, Family::Gaussian, 13);
    let params = params_for(&ds.design, Family::Gaussian, &[0.3, 0.2], 0.25);
    let exact = chol_fisher(&ds.design, &params, 5000).unwrap();
    let z = &ds.design.z;
    let w = vec![4.0; 500];
    let m = assemble(z, &w, &params.sigma_inv(z));
    let p = Preconditioner::build(PrecondKind::Ssor, &m, 0).unwrap();
    let est = ste_fisher_information(z, &m, &p, &w, &ProbeSet::new(1000, ProbeKind::GaussianI, 4, Domain::Fisher), TIGHT, true)
        .unwrap();
    for i in 0..9 {
        assert!((est.matrix[i] - exact[i]).abs() <= 3.0 * est.std_error[i], "{i}: {} vs {}", est.matrix[i], exact[i]);
    }
    for i in 0..3 {
        assert!(est.matrix[i * 3 + i] >= 0.0);
        for j in 0..3 {
            assert!((est.matrix[i * 3 + j] - est.matrix[j * 3 + i]).abs() <= 1e-10);
        }
    }
}
