mod common;

use common::*;
use crossre_core::likelihood::{sigmoid, softplus};
use crossre_core::oracle::{chol_nll, naive_gaussian_nll, DEFAULT_CAP};
use crossre_core::{
    evaluate_nll, Backend, CgConfig, EvalConfig, Evaluator, Family, GroupedDesign, Incidence, ModelParams,
};
use nalgebra::DMatrix;

fn chol() -> EvalConfig {
    EvalConfig { backend: Backend::Cholesky, ..EvalConfig::default() }
}

/// Coordinate-wise Newton ascent of the Bernoulli inner objective, swept to
/// a gradient of `1e-13`.
fn coordinate_mode(d: &GroupedDesign, p: &ModelParams) -> Vec<f64> {
    let z = &d.z;
    let sinv = p.sigma_inv(z);
    let f = d.fixed_effects(&p.beta);
    let mut b = vec![0.0; z.n_cols()];
    let mut rows_of = vec![Vec::new(); z.n_cols()];
    for r in 0..z.n_rows() {
        for &c in z.row(r) {
            rows_of[c].push(r);
        }
    }
    for _ in 0..10_000 {
        let mut worst: f64 = 0.0;
        for j in 0..b.len() {
            let mut g = -sinv[j] * b[j];
            let mut h = -sinv[j];
            for &r in &rows_of[j] {
                let mu = f[r] + z.row(r).iter().map(|&c| b[c]).sum::<f64>();
                let s = sigmoid(mu);
                g += d.y[r] - s;
                h -= s * (1.0 - s);
            }
            worst = worst.max(g.abs());
            b[j] -= g / h;
        }
        if worst < 1e-13 {
            break;
        }
    }
    b
}

fn dense_laplace_nll(d: &GroupedDesign, p: &ModelParams, b: &[f64]) -> f64 {
    let z = &d.z;
    let sinv = p.sigma_inv(z);
    let f = d.fixed_effects(&p.beta);
    let zd = dense_z(z);
    let mu: Vec<f64> = (0..d.n()).map(|r| f[r] + z.row(r).iter().map(|&c| b[c]).sum::<f64>()).collect();
    let logp: f64 = mu.iter().zip(&d.y).map(|(m, y)| y * m - softplus(*m)).sum();
    let w: Vec<f64> = mu.iter().map(|m| sigmoid(*m) * (1.0 - sigmoid(*m))).collect();
    let mut m = zd.transpose() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(w)) * &zd;
    for j in 0..sinv.len() {
        m[(j, j)] += sinv[j];
    }
    let quad: f64 = b.iter().zip(&sinv).map(|(bj, s)| bj * bj * s).sum();
    let logdet_sigma: f64 = sinv.iter().map(|s| -s.ln()).sum();
    -logp + 0.5 * quad + 0.5 * logdet_sigma + 0.5 * dense_logdet(&m)
}

fn central_differences(d: &GroupedDesign, fam: Family, p: &ModelParams, cfg: EvalConfig, h: f64) -> Vec<f64> {
    let x = p.to_unconstrained();
    let mut ev = Evaluator::new(d, fam, cfg).unwrap();
    (0..x.len())
        .map(|i| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = ev.evaluate(&p.from_unconstrained(&xp), false).unwrap().nll;
            let fm = ev.evaluate(&p.from_unconstrained(&xm), false).unwrap().nll;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[test]
fn scalar_gaussian_closed_form() {
    let z = Incidence::from_level_indices(&[1], &[vec![0]]).unwrap();
    let d = GroupedDesign::new(vec![0.0], vec![0.0], 1, z).unwrap();
    let p = ModelParams { re_variances: vec![1.0], error_variance: Some(1.0), beta: vec![0.0] };
    let expected = 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * 2f64.ln();
    assert!((expected - 1.26551).abs() < 1e-5);
    for backend in [Backend::Cholesky, Backend::Krylov] {
        let cfg = EvalConfig { backend, ..EvalConfig::default() };
        let nll = evaluate_nll(&d, Family::Gaussian, &p, cfg, false).unwrap().nll;
        assert!((nll - expected).abs() < 1e-12, "{backend:?}: {nll}");
    }
}

#[test]
fn woodbury_form_matches_dense_covariance() {
    let ds = crossed(400, 30, 20, Family::Gaussian, 3);
    let p = params_for(&ds.design, Family::Gaussian, &[0.4, 0.15], 0.3);
    let fast = chol_nll(&ds.design, Family::Gaussian, &p, false, DEFAULT_CAP).unwrap().nll;
    let naive = naive_gaussian_nll(&ds.design, &p).unwrap();
    assert!((fast - naive).abs() < 1e-8, "{fast} vs {naive}");
}

#[test]
fn vanishing_random_effects_give_iid_gaussian() {
    let ds = crossed(300, 12, 9, Family::Gaussian, 4);
    let mut p = params_for(&ds.design, Family::Gaussian, &[1e-14, 1e-14], 0.7);
    p.beta = vec![0.1; ds.design.p];
    let f = ds.design.fixed_effects(&p.beta);
    let s2 = 0.7;
    let iid: f64 = ds
        .design
        .y
        .iter()
        .zip(&f)
        .map(|(y, m)| 0.5 * (2.0 * std::f64::consts::PI * s2).ln() + 0.5 * (y - m).powi(2) / s2)
        .sum();
    for backend in [Backend::Cholesky, Backend::Krylov] {
        let cfg = EvalConfig { backend, ..EvalConfig::default() };
        let nll = evaluate_nll(&ds.design, Family::Gaussian, &p, cfg, false).unwrap().nll;
        assert!((nll - iid).abs() < 1e-8, "{backend:?}: {nll} vs {iid}");
    }
}

#[test]
fn gaussian_through_laplace_equals_direct_path() {
    let ds = crossed(250, 15, 10, Family::Gaussian, 5);
    let p = params_for(&ds.design, Family::Gaussian, &[0.3, 0.2], 0.4);
    let direct = evaluate_nll(&ds.design, Family::Gaussian, &p, chol(), true).unwrap();
    let cfg = EvalConfig { force_laplace: true, ..chol() };
    let laplace = evaluate_nll(&ds.design, Family::Gaussian, &p, cfg, true).unwrap();
    assert!(rel_err(laplace.nll, direct.nll, 1.0) < 1e-10);
    for (a, b) in laplace.gradient().iter().zip(direct.gradient()) {
        assert!(rel_err(*a, b, 1.0) < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn gaussian_mode_needs_one_newton_step() {
    let ds = crossed(200, 10, 10, Family::Gaussian, 6);
    let p = params_for(&ds.design, Family::Gaussian, &[0.3, 0.2], 0.4);
    let cfg = EvalConfig { force_laplace: true, ..chol() };
    let mut ev = Evaluator::new(&ds.design, Family::Gaussian, cfg).unwrap();
    let mode = ev.find_mode(&p).unwrap();
    assert!(mode.iterations <= 2, "{}", mode.iterations);
    assert!(mode.stationarity < 1e-9);
}

#[test]
fn balanced_bernoulli_responses_have_zero_mode() {
    let levels: Vec<usize> = (0..40).map(|r| r / 2).collect();
    let z = Incidence::from_level_indices(&[20], &[levels]).unwrap();
    let y: Vec<f64> = (0..40).map(|r| (r % 2) as f64).collect();
    let d = GroupedDesign::new(y, vec![1.0; 40], 1, z).unwrap();
    let p = ModelParams { re_variances: vec![0.5], error_variance: None, beta: vec![0.0] };
    for backend in [Backend::Cholesky, Backend::Krylov] {
        let cfg = EvalConfig { backend, ..EvalConfig::default() };
        let mode = Evaluator::new(&d, Family::Bernoulli, cfg).unwrap().find_mode(&p).unwrap();
        assert!(mode.b.iter().all(|b| b.abs() < 1e-12));
    }
}

#[test]
fn bernoulli_mode_matches_coordinate_ascent() {
    let ds = crossed(400, 25, 25, Family::Bernoulli, 7);
    let p = params_for(&ds.design, Family::Bernoulli, &[0.6, 0.3], 0.0);
    let oracle = coordinate_mode(&ds.design, &p);
    for backend in [Backend::Cholesky, Backend::Krylov] {
        let cfg = EvalConfig { backend, ..EvalConfig::default() };
        let mode = Evaluator::new(&ds.design, Family::Bernoulli, cfg).unwrap().find_mode(&p).unwrap();
        assert!(mode.converged);
        let dev = mode.b.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-6, "{backend:?}: {dev}");
    }
}

#[test]
fn laplace_nll_matches_dense_evaluation() {
    let ds = crossed(400, 25, 25, Family::Bernoulli, 8);
    let p = params_for(&ds.design, Family::Bernoulli, &[0.6, 0.3], 0.0);
    let b = coordinate_mode(&ds.design, &p);
    let expected = dense_laplace_nll(&ds.design, &p, &b);
    let nll = chol_nll(&ds.design, Family::Bernoulli, &p, false, DEFAULT_CAP).unwrap().nll;
    assert!((nll - expected).abs() < 1e-8, "{nll} vs {expected}");
}

#[test]
fn cholesky_gradients_match_finite_differences() {
    for fam in [Family::Gaussian, Family::Bernoulli] {
        let ds = crossed(500, 25, 25, fam, 9);
        let p = params_for(&ds.design, fam, &[0.35, 0.2], 0.3);
        let g = evaluate_nll(&ds.design, fam, &p, chol(), true).unwrap().gradient();
        let fd = central_differences(&ds.design, fam, &p, chol(), 1e-5);
        for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
            assert!(rel_err(*a, *b, 1.0) < 1e-4, "{fam:?} coordinate {i}: {a} vs {b}");
        }
    }
}

#[test]
fn krylov_gradients_are_within_three_standard_errors_of_exact() {
    for fam in [Family::Gaussian, Family::Bernoulli] {
        let ds = crossed(500, 25, 25, fam, 10);
        let p = params_for(&ds.design, fam, &[0.35, 0.2], 0.3);
        let exact = evaluate_nll(&ds.design, fam, &p, chol(), true).unwrap().gradient();
        let grads: Vec<Vec<f64>> = (0..30)
            .map(|s| {
                let cfg = EvalConfig { seed: 100 + s, cg: CgConfig { tol: 1e-8, max_iter: 1000 }, ..EvalConfig::default() };
                evaluate_nll(&ds.design, fam, &p, cfg, true).unwrap().gradient()
            })
            .collect();
        for i in 0..exact.len() {
            let col: Vec<f64> = grads.iter().map(|g| g[i]).collect();
            let (_, sd) = mean_sd(&col);
            let dev = (grads[0][i] - exact[i]).abs();
            assert!(dev <= 3.0 * sd + 1e-6 * exact[i].abs().max(1.0), "{fam:?} coordinate {i}: {dev} vs sd {sd}");
        }
    }
}

#[test]
fn nll_is_invariant_to_row_order() {
    let ds = crossed(300, 15, 12, Family::Bernoulli, 11);
    let p = params_for(&ds.design, Family::Bernoulli, &[0.4, 0.3], 0.0);
    let perm: Vec<usize> = (0..300).map(|i| (i * 7 + 3) % 300).collect();
    let shuffled = ds.design.select_rows(&perm);
    for backend in [Backend::Cholesky, Backend::Krylov] {
        let cfg = EvalConfig { backend, ..EvalConfig::default() };
        let a = evaluate_nll(&ds.design, Family::Bernoulli, &p, cfg, false).unwrap().nll;
        let b = evaluate_nll(&shuffled, Family::Bernoulli, &p, cfg, false).unwrap().nll;
        assert!(rel_err(a, b, 1.0) < 1e-6, "{backend:?}: {a} vs {b}");
    }
}
