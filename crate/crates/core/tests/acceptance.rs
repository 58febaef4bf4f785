//! Acceptance suite. Prints one pass/fail line per criterion and exits
//! non-zero when any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 3 4`.

mod common;

use std::time::Instant;

use common::*;
use crossre_core::oracle::DEFAULT_CAP;
use crossre_core::predict::Predictor;
use crossre_core::simulate::score_values;
use crossre_core::spectral::{preconditioned_spectrum, SpectralReport};
use crossre_core::{
    evaluate_nll, fit, simulate_dataset, split, Backend, CgConfig, DesignKind, EvalConfig, Evaluator, Family,
    GroupedDesign, ModelParams, NormalMatrix, OptimConfig, PrecondKind, PredictConfig, PredictionSpec, Preconditioner,
    SimConfig, SimDataset, VarianceMethod,
};
use nalgebra::DMatrix;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn chol() -> EvalConfig {
    EvalConfig { backend: Backend::Cholesky, ..EvalConfig::default() }
}

fn no_se() -> OptimConfig {
    OptimConfig { std_errors: false, ..OptimConfig::default() }
}

fn gaussian_sim(n: usize, levels: [usize; 2], design: DesignKind, covariates: usize, seed: u64) -> SimDataset {
    simulate_dataset(&SimConfig {
        n,
        levels: levels.to_vec(),
        re_variances: vec![0.25, 0.25],
        error_variance: 0.25,
        family: Family::Gaussian,
        design,
        n_covariates: covariates,
        seed,
    })
    .unwrap()
}

fn gaussian_m(ds: &SimDataset) -> NormalMatrix {
    let p = &ds.truth.params;
    let z = &ds.design.z;
    assemble(z, &vec![1.0 / p.error_variance.unwrap(); z.n_rows()], &p.sigma_inv(z))
}

fn spectrum(ds: &SimDataset, m: &NormalMatrix, kind: PrecondKind) -> SpectralReport {
    let p = Preconditioner::build(kind, m, 0).unwrap();
    preconditioned_spectrum(m, &p, &ds.design.z).unwrap()
}

fn c1_oracle_nll() -> Outcome {
    let ds = gaussian_sim(20_000, [1000, 1000], DesignKind::Random, 5, 101);
    let p = &ds.truth.params;
    let exact = evaluate_nll(&ds.design, Family::Gaussian, p, chol(), false).unwrap().nll;
    let t = Instant::now();
    let k = evaluate_nll(&ds.design, Family::Gaussian, p, EvalConfig::default(), false).unwrap().nll;
    let secs = t.elapsed().as_secs_f64();
    let rel = rel_err(k, exact, 0.0);
    outcome(rel <= 1e-3 && secs < 10.0, format!("relative error {rel:.2e} (<= 1e-3), krylov {secs:.2} s (< 10 s)"))
}

fn c2_precond_variance() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for family in [Family::Gaussian, Family::Bernoulli] {
        let ds = simulate_dataset(&SimConfig::crossed(20_000, 2000, family, DesignKind::Random, 102)).unwrap();
        let sd = |kind: PrecondKind| {
            let v: Vec<f64> = (0..30)
                .map(|r| {
                    let cfg = EvalConfig { precond: kind, seed: 1000 + r, ..EvalConfig::default() };
                    evaluate_nll(&ds.design, family, &ds.truth.params, cfg, false).unwrap().nll
                })
                .collect();
            mean_sd(&v).1
        };
        let (s, z, d) = (sd(PrecondKind::Ssor), sd(PrecondKind::Zic), sd(PrecondKind::Diagonal));
        pass &= s < d && z < d;
        parts.push(format!("{family:?}: sd ssor {s:.3e}, zic {z:.3e}, diagonal {d:.3e}"));
    }
    outcome(pass, parts.join("; "))
}

fn c3_closed_forms() -> Outcome {
    let ds = gaussian_sim(1000, [100, 100], DesignKind::Balanced, 0, 103);
    let m = gaussian_m(&ds);
    let s = spectrum(&ds, &m, PrecondKind::Ssor);
    let g = spectrum(&ds, &m, PrecondKind::Diagonal);
    let q = 10.0 / 11.0;
    let unit = s.eigenvalues.iter().filter(|v| (*v - 1.0).abs() <= 1e-8).count();
    let errs = [
        (s.lambda_max - 1.0).abs(),
        (s.lambda_min - (1.0 - q * q)).abs(),
        (g.lambda_max - (1.0 + q)).abs(),
        (g.lambda_min - (1.0 - q)).abs(),
        (g.kappa - 21.0).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst <= 1e-8 && unit >= 100,
        format!("largest deviation {worst:.2e} (<= 1e-8), unit SSOR eigenvalues {unit} (>= 100)"),
    )
}

fn c4_biregular_scaling() -> Outcome {
    let mut ssor = Vec::new();
    let mut diag = Vec::new();
    for (d, seed) in [(4usize, 104u64), (16, 105), (64, 106)] {
        let ds = gaussian_sim(500 * d, [500, 500], DesignKind::Biregular, 0, seed);
        let m = gaussian_m(&ds);
        ssor.push(spectrum(&ds, &m, PrecondKind::Ssor).kappa_m1_1 - 1.0);
        diag.push(spectrum(&ds, &m, PrecondKind::Diagonal).kappa_m1_2 - 1.0);
    }
    let rs = [ssor[0] / ssor[1], ssor[1] / ssor[2]];
    let rd = [diag[0] / diag[1], diag[1] / diag[2]];
    let pass = rs.iter().all(|r| (2.5..=6.0).contains(r)) && rd.iter().all(|r| (1.4..=2.8).contains(r));
    outcome(
        pass,
        format!(
            "ssor shrink ratios {:.2}, {:.2} (in [2.5, 6]); diagonal {:.2}, {:.2} (in [1.4, 2.8])",
            rs[0], rs[1], rd[0], rd[1]
        ),
    )
}

fn central_differences(d: &GroupedDesign, fam: Family, p: &ModelParams, cfg: EvalConfig, h: f64) -> Vec<f64> {
    let x = p.to_unconstrained();
    let mut ev = Evaluator::new(d, fam, cfg).unwrap();
    (0..x.len())
        .map(|i| {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fp = ev.evaluate(&p.from_unconstrained(&xp), false).unwrap().nll;
            let fm = ev.evaluate(&p.from_unconstrained(&xm), false).unwrap().nll;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn max_rel_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, 1.0)).fold(0.0, f64::max)
}

fn c5_gradients() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for fam in [Family::Gaussian, Family::Bernoulli] {
        let ds = crossed(500, 25, 25, fam, 105);
        let p = params_for(&ds.design, fam, &[0.35, 0.2], 0.3);
        // A loose inner mode makes differences of the objective noisy at small steps.
        let tight = EvalConfig { mode_tol: 1e-14, warm_start: false, ..chol() };
        let g = evaluate_nll(&ds.design, fam, &p, tight, true).unwrap().gradient();
        let exact = max_rel_gap(&g, &central_differences(&ds.design, fam, &p, tight, 1e-5));
        // Frozen probes make the Krylov objective a deterministic function.
        let saa = EvalConfig {
            backend: Backend::Krylov,
            num_probes: 10_000,
            seed: 7,
            cg: CgConfig { tol: 1e-10, max_iter: 1000 },
            ..tight
        };
        let g = evaluate_nll(&ds.design, fam, &p, saa, true).unwrap().gradient();
        let stochastic = max_rel_gap(&g, &central_differences(&ds.design, fam, &p, saa, 1e-5));
        pass &= exact <= 1e-4 && stochastic <= 1e-3;
        parts.push(format!("{fam:?}: cholesky {exact:.2e} (<= 1e-4), krylov {stochastic:.2e} (<= 1e-3)"));
    }
    outcome(pass, parts.join("; "))
}

struct Instance {
    train: GroupedDesign,
    spec: PredictionSpec,
    params: ModelParams,
}

fn prediction_instance(seed: u64) -> Instance {
    let ds = simulate_dataset(&SimConfig::crossed(6000, 500, Family::Gaussian, DesignKind::Random, seed)).unwrap();
    let sp = split(&ds, 1000, seed).unwrap();
    Instance { train: sp.train, spec: sp.spec, params: ds.truth.params.clone() }
}

/// Oracle `diag(Z_po M⁻¹ Z_poᵀ) + diag(Z_pp Σ_p Z_ppᵀ)` from a dense inverse.
fn oracle_diag(inst: &Instance) -> Vec<f64> {
    let z = &inst.train.z;
    let w = vec![1.0 / inst.params.error_variance.unwrap(); z.n_rows()];
    let minv: DMatrix<f64> = dense(&assemble(z, &w, &inst.params.sigma_inv(z))).try_inverse().unwrap();
    (0..inst.spec.n_rows())
        .map(|i| {
            let s = inst.spec.seen_levels(i);
            let seen: f64 = s.iter().flat_map(|&a| s.iter().map(move |&b| (a, b))).map(|(a, b)| minv[(a, b)]).sum();
            seen + inst.spec.new_level_variance(i, &inst.params)
        })
        .collect()
}

fn pcfg(method: VarianceMethod, samples: usize, seed: u64) -> PredictConfig {
    PredictConfig { method, samples, seed, cg: CgConfig { tol: 1e-10, max_iter: 5000 }, ..PredictConfig::default() }
}

fn raw_variances(pred: &Predictor, c: &PredictConfig) -> Vec<f64> {
    match c.method {
        VarianceMethod::StochasticDiag => pred.var_stochastic_diag(c),
        VarianceMethod::SimulationNormal => pred.var_sim_normal(c),
        VarianceMethod::SimulationPsi => pred.var_sim_psi(c),
        _ => pred.variances(c),
    }
    .unwrap()
    .var
}

fn rmse(v: &[f64], oracle: &[f64]) -> f64 {
    (v.iter().zip(oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn c6_unbiasedness() -> Outcome {
    let inst = prediction_instance(106);
    let oracle = oracle_diag(&inst);
    let eval = EvalConfig { solve_rel_tol: 1e-12, ..EvalConfig::default() };
    let pred = Predictor::new(&inst.train, Family::Gaussian, &inst.params, &inst.spec, &eval).unwrap();
    let reps = 200;
    let mut pass = true;
    let mut parts = Vec::new();
    for method in [VarianceMethod::StochasticDiag, VarianceMethod::SimulationNormal, VarianceMethod::SimulationPsi] {
        let est: Vec<Vec<f64>> = (0..reps).map(|r| raw_variances(&pred, &pcfg(method, 50, 10_000 + r))).collect();
        let bad = (0..oracle.len())
            .filter(|&i| {
                let col: Vec<f64> = est.iter().map(|e| e[i]).collect();
                let (mean, sd) = mean_sd(&col);
                (mean - oracle[i]).abs() > 3.0 * sd / (reps as f64).sqrt() + 1e-12
            })
            .count();
        let rate = bad as f64 / oracle.len() as f64;
        pass &= rate <= 0.01;
        parts.push(format!("{} failure rate {:.2}%", method.name(), 100.0 * rate));
    }
    let alg1 = |s: usize| -> f64 {
        let e: Vec<f64> = (0..20)
            .map(|r| rmse(&raw_variances(&pred, &pcfg(VarianceMethod::StochasticDiag, s, 20_000 + r)), &oracle).powi(2))
            .collect();
        (e.iter().sum::<f64>() / e.len() as f64).sqrt()
    };
    let ratio = alg1(50) / alg1(200);
    pass &= (1.5..=2.5).contains(&ratio);
    parts.push(format!("rmse ratio s=50/s=200 {ratio:.2} (in [1.5, 2.5])"));
    outcome(pass, format!("{} (each <= 1%); {}", parts[..3].join(", "), parts[3]))
}

fn c7_method_ranking() -> Outcome {
    let inst = prediction_instance(107);
    let oracle = oracle_diag(&inst);
    let pred = Predictor::new(&inst.train, Family::Gaussian, &inst.params, &inst.spec, &EvalConfig::default()).unwrap();
    let cfg = |method, s, seed| PredictConfig { method, samples: s, seed, ..PredictConfig::default() };
    // Raw estimates throughout; clamping would mask Lanczos cancellation errors.
    let timed = |c: &PredictConfig| {
        let t = Instant::now();
        let v = match c.method {
            VarianceMethod::Lanczos => pred.var_lanczos(c.lanczos_rank, c.seed).unwrap().var,
            _ => raw_variances(&pred, c),
        };
        (t.elapsed().as_secs_f64(), v)
    };
    let methods = [VarianceMethod::StochasticDiag, VarianceMethod::SimulationNormal, VarianceMethod::SimulationPsi];
    let s_ref = 100;
    // Seconds per sample, from the median of three timings.
    let per_sample: Vec<f64> = methods
        .iter()
        .map(|&m| {
            let mut t: Vec<f64> = (0..3).map(|r| timed(&cfg(m, s_ref, 900 + r)).0).collect();
            t.sort_by(f64::total_cmp);
            t[1] / s_ref as f64
        })
        .collect();
    let budget = per_sample[0] * s_ref as f64;
    let mut errs = Vec::new();
    let mut desc = Vec::new();
    for (i, &m) in methods.iter().enumerate() {
        let s = ((budget / per_sample[i]).round() as usize).max(1);
        let e: Vec<f64> = (0..10).map(|r| rmse(&timed(&cfg(m, s, 500 + r)).1, &oracle)).collect();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        errs.push(mean);
        desc.push(format!("{} s={s} rmse {mean:.3e}", m.name()));
    }
    let mut k = 100;
    loop {
        let (secs, v) = timed(&PredictConfig { lanczos_rank: k, ..cfg(VarianceMethod::Lanczos, 0, 0) });
        if secs <= budget || k == 1 {
            let e = rmse(&v, &oracle);
            errs.push(e);
            desc.push(format!("lanczos k={k} rmse {e:.3e}"));
            break;
        }
        k = ((k as f64 * budget / secs) as usize).clamp(1, k - 1);
    }
    let pass = errs.windows(2).all(|w| w[0] < w[1]);
    outcome(pass, format!("budget {:.3} s: {}", budget, desc.join(", ")))
}

fn c8_estimation_recovery() -> Outcome {
    let reps = 100;
    let t = Instant::now();
    let est: Vec<f64> = (0..reps)
        .map(|r| {
            let ds =
                simulate_dataset(&SimConfig::crossed(40_000, 4000, Family::Gaussian, DesignKind::Random, 8000 + r))
                    .unwrap();
            let init = ModelParams::initial(&ds.design, Family::Gaussian, Some(0));
            fit(&ds.design, Family::Gaussian, &init, EvalConfig::default(), &no_se()).unwrap().params.re_variances[0]
        })
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let bias = est.iter().map(|v| v - 0.25).sum::<f64>() / reps as f64;
    let rmse = (est.iter().map(|v| (v - 0.25).powi(2)).sum::<f64>() / reps as f64).sqrt();
    let (lo, hi) = (0.6 * 8.97e-3, 1.5 * 8.97e-3);
    outcome(
        (lo..=hi).contains(&rmse) && bias.abs() <= 2e-3 && secs <= 7200.0,
        format!(
            "{reps} reps: rmse {rmse:.3e} (in [{lo:.3e}, {hi:.3e}]), bias {bias:.2e} (|.| <= 2e-3), {secs:.0} s (<= 7200 s)"
        ),
    )
}

fn c9_laplace_bias() -> Outcome {
    let reps = 100;
    let means: Vec<f64> = [5usize, 20, 80]
        .iter()
        .map(|&d| {
            let est: Vec<f64> = (0..reps)
                .map(|r| {
                    let ds = simulate_dataset(&SimConfig {
                        n: 200 * d,
                        levels: vec![200, 200],
                        re_variances: vec![0.25, 0.25],
                        error_variance: 0.25,
                        family: Family::Bernoulli,
                        design: DesignKind::Balanced,
                        n_covariates: 5,
                        seed: 9000 + 1000 * d as u64 + r,
                    })
                    .unwrap();
                    let init = ModelParams::initial(&ds.design, Family::Bernoulli, Some(0));
                    fit(&ds.design, Family::Bernoulli, &init, chol(), &no_se()).unwrap().params.re_variances[0]
                })
                .collect();
            est.iter().sum::<f64>() / reps as f64
        })
        .collect();
    let pass = means.iter().all(|m| *m < 0.25) && means.windows(2).all(|w| w[0] < w[1]);
    outcome(
        pass,
        format!("{reps} reps: mean estimate d=5 {:.4}, d=20 {:.4}, d=80 {:.4} (each < 0.25, increasing)", means[0], means[1], means[2]),
    )
}

fn c10_backends() -> Outcome {
    let mut worst_param: f64 = 0.0;
    let mut worst_rmse: f64 = 0.0;
    let mut worst_ls: f64 = 0.0;
    let datasets = 20;
    for family in [Family::Gaussian, Family::Bernoulli] {
        for r in 0..datasets {
            let ds = simulate_dataset(&SimConfig::crossed(20_000, 1000, family, DesignKind::Random, 10_000 + r)).unwrap();
            let sp = split(&ds, 10_000, 10_000 + r).unwrap();
            let init = ModelParams::initial(&sp.train, family, Some(0));
            let run = |eval: EvalConfig, method| {
                let f = fit(&sp.train, family, &init, eval, &no_se()).unwrap();
                let pred = Predictor::new(&sp.train, family, &f.params, &sp.spec, &eval).unwrap();
                let d = pred.predict(&PredictConfig { method, ..PredictConfig::default() }).unwrap();
                (f.params, score_values(&sp.test_re, &d.re_mean, &d.var).unwrap())
            };
            let (pa, sa) = run(chol(), VarianceMethod::Exact);
            let (pb, sb) = run(EvalConfig::default(), PredictConfig::default().method);
            let flat = |p: &ModelParams| -> Vec<f64> {
                p.re_variances.iter().chain(&p.error_variance).chain(&p.beta).copied().collect()
            };
            for (x, y) in flat(&pa).iter().zip(&flat(&pb)) {
                worst_param = worst_param.max((x - y).abs());
            }
            worst_rmse = worst_rmse.max((sa.rmse - sb.rmse).abs());
            worst_ls = worst_ls.max((sa.log_score - sb.log_score).abs());
        }
    }
    outcome(
        worst_param <= 1e-2 && worst_rmse <= 1e-3 && worst_ls <= 1e-2,
        format!(
            "{datasets} datasets per likelihood: parameter gap {worst_param:.2e} (<= 1e-2), rmse gap {worst_rmse:.2e} (<= 1e-3), log score gap {worst_ls:.2e} (<= 1e-2)"
        ),
    )
}

fn c11_speedup() -> Outcome {
    let big = gaussian_sim(200_000, [10_000, 10_000], DesignKind::Random, 5, 111);
    let t = Instant::now();
    evaluate_nll(&big.design, Family::Gaussian, &big.truth.params, EvalConfig::default(), false).unwrap();
    let krylov = t.elapsed().as_secs_f64();
    let refused = evaluate_nll(&big.design, Family::Gaussian, &big.truth.params, chol(), false).is_err();
    // Dense cost grows with the cube of the dimension.
    let m_ref = 2000;
    let small = gaussian_sim(10 * m_ref, [m_ref / 2, m_ref / 2], DesignKind::Random, 5, 112);
    let t = Instant::now();
    evaluate_nll(&small.design, Family::Gaussian, &small.truth.params, chol(), false).unwrap();
    let dense_ref = t.elapsed().as_secs_f64();
    let dense = dense_ref * (20_000.0 / m_ref as f64).powi(3);
    let speedup = dense / krylov;
    outcome(
        speedup >= 10.0 || refused,
        format!(
            "krylov {krylov:.2} s, dense extrapolated {dense:.0} s from {dense_ref:.2} s at m={m_ref}, speedup {speedup:.0}x (>= 10x); dense path refused above cap {DEFAULT_CAP}: {refused}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("oracle nll equivalence", c1_oracle_nll),
        ("preconditioner variance ordering", c2_precond_variance),
        ("spectral closed forms", c3_closed_forms),
        ("biregular condition number scaling", c4_biregular_scaling),
        ("gradient correctness", c5_gradients),
        ("predictive variance unbiasedness", c6_unbiasedness),
        ("predictive variance method ranking", c7_method_ranking),
        ("estimation recovery", c8_estimation_recovery),
        ("laplace bias shape", c9_laplace_bias),
        ("backend interchangeability", c10_backends),
        ("speedup direction", c11_speedup),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "criterion {n:>2} {name}: {} [{:.1} s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
