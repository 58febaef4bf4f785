use std::path::{Path, PathBuf};
use std::time::Instant;

use crossre_core::sparse::NormalPattern;
use crossre_core::spectral::{preconditioned_spectrum, bound_report, BoundInputs, DesignMeta, SPECTRAL_CAP};
use crossre_core::{
    evaluate_nll, fit, predict, simulate_dataset, split, Backend, EvalConfig, Evaluator, Family, FitResult,
    GroupedDesign, ModelParams, PrecondKind, Preconditioner,
};
use serde::{Deserialize, Serialize};

use crate::cli::{BenchArgs, FitArgs, PredictArgs, SimulateArgs, SpectrumArgs};
use crate::config::{
    parse_precond, resolve_estimation, resolve_model, resolve_prediction, resolve_simulation, EstimationFlags,
    FileConfig,
};
use crate::data::{design_from_table, prediction_spec, ModelSpec, Table};
use crate::error::{CliError, Result};
use crate::format::{csv_text, fmt_f64, write_json, write_text};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub re_variances: Vec<f64>,
    pub error_variance: Option<f64>,
    pub beta: Vec<f64>,
}

impl From<&ModelParams> for ParamsRecord {
    fn from(p: &ModelParams) -> Self {
        Self { re_variances: p.re_variances.clone(), error_variance: p.error_variance, beta: p.beta.clone() }
    }
}

impl ParamsRecord {
    pub fn to_params(&self) -> ModelParams {
        ModelParams {
            re_variances: self.re_variances.clone(),
            error_variance: self.error_variance,
            beta: self.beta.clone(),
        }
    }
}

/// Settings needed to re-create the evaluator of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRecord {
    pub backend: String,
    pub precond: String,
    pub probes: usize,
    pub seed: u64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub solve_tol: f64,
}

impl From<&EvalConfig> for EstimationRecord {
    fn from(e: &EvalConfig) -> Self {
        Self {
            backend: e.backend.name().into(),
            precond: e.precond.name(),
            probes: e.num_probes,
            seed: e.seed,
            cg_tol: e.cg.tol,
            cg_max_iter: e.cg.max_iter,
            solve_tol: e.solve_rel_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub precond_used: Option<String>,
    pub zic_fell_back: bool,
    pub probe_cg_iterations: usize,
    pub probe_cg_max_iterations: usize,
    pub probe_not_converged: usize,
    pub solve_cg_iterations: usize,
    pub slq_std_error: Option<f64>,
    pub newton_iterations: usize,
}

impl From<&crossre_core::Diagnostics> for DiagnosticsRecord {
    fn from(d: &crossre_core::Diagnostics) -> Self {
        Self {
            precond_used: d.precond_used.map(|k| k.name()),
            zic_fell_back: d.zic_fell_back,
            probe_cg_iterations: d.probe_cg_iterations,
            probe_cg_max_iterations: d.probe_cg_max_iterations,
            probe_not_converged: d.probe_not_converged,
            solve_cg_iterations: d.solve_cg_iterations,
            slq_std_error: d.slq_std_error,
            newton_iterations: d.newton_iterations,
        }
    }
}

/// Contents of the fit JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutput {
    pub model: ModelSpec,
    pub data: String,
    pub n: usize,
    pub levels: Vec<usize>,
    pub estimation: EstimationRecord,
    pub params: ParamsRecord,
    pub beta_names: Vec<String>,
    /// `(σ_1², …, σ_K², σ²)`, Gaussian only.
    pub std_errors: Option<Vec<f64>>,
    /// Row-major Fisher information in the same order.
    pub fisher: Option<Vec<f64>>,
    pub nll: f64,
    pub nll_trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: String,
    pub converged: bool,
    pub grad_inf_norm: f64,
    pub diagnostics: DiagnosticsRecord,
    pub wall_clock_seconds: Option<f64>,
}

impl FitOutput {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read fit {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("fit {}: {e}", path.display())))
    }

    fn new(
        spec: &ModelSpec,
        data: &str,
        design: &GroupedDesign,
        eval: &EvalConfig,
        res: &FitResult,
        seconds: Option<f64>,
    ) -> Self {
        Self {
            model: spec.clone(),
            data: data.into(),
            n: design.n(),
            levels: design.z.level_counts().to_vec(),
            estimation: eval.into(),
            params: (&res.params).into(),
            beta_names: spec.beta_names(),
            std_errors: res.std_errors.clone(),
            fisher: res.fisher.clone(),
            nll: res.nll(),
            nll_trace: res.nll_trace.clone(),
            iterations: res.iterations,
            evaluations: res.evaluations,
            reason: res.reason.name().into(),
            converged: res.reason.converged(),
            grad_inf_norm: res.grad_inf_norm,
            diagnostics: (&res.diagnostics).into(),
            wall_clock_seconds: seconds,
        }
    }
}

fn load_training(data: &str, spec: &ModelSpec) -> Result<(GroupedDesign, crossre_core::ReStructure)> {
    let table = Table::read(&PathBuf::from(data))?;
    design_from_table(&table, spec)
}

pub fn run_simulate(args: &SimulateArgs, file: &FileConfig) -> Result<()> {
    let (cfg, test_size) = resolve_simulation(&args.flags(), &file.simulation)?;
    let ds = simulate_dataset(&cfg)?;
    let k = cfg.levels.len();
    let mut header = vec!["y".to_string()];
    header.extend((1..=cfg.n_covariates).map(|j| format!("x{j}")));
    header.extend((1..=k).map(|f| format!("g{f}")));
    header.push("re_truth".into());
    header.push("latent_truth".into());
    let p = ds.design.p;
    let row = |i: usize| -> Vec<String> {
        let mut r = vec![fmt_f64(ds.design.y[i])];
        r.extend(ds.design.x_row(i)[1..p].iter().map(|v| fmt_f64(*v)));
        r.extend((0..k).map(|f| format!("L{}", ds.codes[f][i])));
        r.push(fmt_f64(ds.truth.re_effect[i]));
        r.push(fmt_f64(ds.truth.latent[i]));
        r
    };
    let dir = &args.out_dir;
    let mut files = Vec::new();
    if test_size > 0 {
        let sp = split(&ds, test_size, cfg.seed).map_err(|e| CliError::usage(e.to_string()))?;
        let train: Vec<Vec<String>> = sp.train_rows.iter().map(|&i| row(i)).collect();
        let test: Vec<Vec<String>> = sp.test_rows.iter().map(|&i| row(i)).collect();
        write_text(Some(&dir.join("train.csv")), &csv_text(&header, &train)?)?;
        write_text(Some(&dir.join("test.csv")), &csv_text(&header, &test)?)?;
        files.extend(["train.csv", "test.csv"]);
    } else {
        let all: Vec<Vec<String>> = (0..cfg.n).map(row).collect();
        write_text(Some(&dir.join("data.csv")), &csv_text(&header, &all)?)?;
        files.push("data.csv");
    }
    let truth = SimTruth {
        n: cfg.n,
        levels: cfg.levels.clone(),
        family: cfg.family.name().into(),
        design: cfg.design.name().into(),
        seed: cfg.seed,
        test_size,
        files: files.iter().map(|s| s.to_string()).collect(),
        response: "y".into(),
        fixed: header[1..=cfg.n_covariates].to_vec(),
        groups: (1..=k).map(|f| format!("g{f}")).collect(),
        params: (&ds.truth.params).into(),
        effects: ds.truth.effects.clone(),
    };
    write_json(Some(&dir.join("truth.json")), &truth)
}

#[derive(Debug, Serialize)]
struct SimTruth {
    n: usize,
    levels: Vec<usize>,
    family: String,
    design: String,
    seed: u64,
    test_size: usize,
    files: Vec<String>,
    response: String,
    fixed: Vec<String>,
    groups: Vec<String>,
    params: ParamsRecord,
    /// Realized effects per factor, indexed by level code.
    effects: Vec<Vec<f64>>,
}

pub fn run_fit(args: &FitArgs, file: &FileConfig) -> Result<()> {
    let (data, spec) = resolve_model(&args.model.flags(), &file.model)?;
    let (eval, optim) = resolve_estimation(&args.estimation.flags(), &file.estimation)?;
    let family = spec.family()?;
    let (design, _) = load_training(&data, &spec)?;
    let init = ModelParams::initial(&design, family, spec.intercept_col());
    let start = Instant::now();
    let res = fit(&design, family, &init, eval, &optim)?;
    let seconds = (!args.omit_timing).then(|| start.elapsed().as_secs_f64());
    let out = FitOutput::new(&spec, &data, &design, &eval, &res, seconds);
    write_json(args.out.as_deref(), &out)
}

/// Estimation flags of `args`, falling back to the settings recorded in a fit.
fn with_recorded(flags: EstimationFlags, rec: &EstimationRecord) -> EstimationFlags {
    EstimationFlags {
        backend: flags.backend.or_else(|| Some(rec.backend.clone())),
        precond: flags.precond.or_else(|| Some(rec.precond.clone())),
        probes: flags.probes.or(Some(rec.probes)),
        seed: flags.seed.or(Some(rec.seed)),
        cg_tol: flags.cg_tol.or(Some(rec.cg_tol)),
        cg_max_iter: flags.cg_max_iter.or(Some(rec.cg_max_iter)),
        solve_tol: flags.solve_tol.or(Some(rec.solve_tol)),
        ..flags
    }
}

#[derive(Debug, Serialize)]
struct Scores {
    n: usize,
    rmse: f64,
    log_score: f64,
    method: String,
    samples: usize,
    clamped: usize,
}

pub fn run_predict(args: &PredictArgs, file: &FileConfig) -> Result<()> {
    let fit_out = FitOutput::read(&args.fit)?;
    let spec = &fit_out.model;
    let family = spec.family()?;
    let data = args.data.clone().unwrap_or_else(|| fit_out.data.clone());
    let (design, structure) = load_training(&data, spec)?;
    let params = fit_out.params.to_params();
    let (eval, _) = resolve_estimation(&with_recorded(args.estimation.flags(), &fit_out.estimation), &file.estimation)?;
    let pcfg = resolve_prediction(&args.flags(), &file.prediction)?;
    let new = Table::read(&args.new)?;
    let truth = args.truth_column.as_deref().map(|c| new.numeric(c)).transpose()?;
    let pspec = prediction_spec(&new, spec, &design, &structure)?;
    let dist = predict(&design, family, &params, &pspec, &eval, &pcfg)?;
    let resp = dist.response.as_ref().expect("predict fills the response summary");
    let header: Vec<String> =
        ["row", "omega", "re_mean", "var", "response_mean", "response_var"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = (0..dist.mean.len())
        .map(|i| {
            vec![
                i.to_string(),
                fmt_f64(dist.mean[i]),
                fmt_f64(dist.re_mean[i]),
                fmt_f64(dist.var[i]),
                fmt_f64(resp.mean[i]),
                fmt_f64(resp.var[i]),
            ]
        })
        .collect();
    write_text(args.out.as_deref(), &csv_text(&header, &rows)?)?;
    match (truth, &args.scores) {
        (Some(t), path) => {
            let s = crossre_core::simulate::evaluate_predictions(&t, &dist)?;
            let scores = Scores {
                n: t.len(),
                rmse: s.rmse,
                log_score: s.log_score,
                method: pcfg.method.name().into(),
                samples: dist.samples,
                clamped: dist.clamped,
            };
            match path {
                Some(p) => write_json(Some(p), &scores),
                None => {
                    eprint!("{}", crate::format::to_json(&scores));
                    Ok(())
                }
            }
        }
        (None, Some(_)) => Err(CliError::usage("--scores requires --truth-column")),
        (None, None) => Ok(()),
    }
}

fn params_for(path: Option<&Path>, design: &GroupedDesign, spec: &ModelSpec, family: Family) -> Result<ModelParams> {
    let params = match path {
        Some(p) => FitOutput::read(p)?.params.to_params(),
        None => ModelParams::initial(design, family, spec.intercept_col()),
    };
    params.validate(design, family).map_err(|e| CliError::usage(format!("parameters do not match the data: {e}")))?;
    Ok(params)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn run_bench(args: &BenchArgs, file: &FileConfig) -> Result<()> {
    let (data, spec) = resolve_model(&args.model.flags(), &file.model)?;
    let (eval, _) = resolve_estimation(&args.estimation.flags(), &file.estimation)?;
    let family = spec.family()?;
    let (design, _) = load_training(&data, &spec)?;
    let params = params_for(args.params_from.as_deref(), &design, &spec, family)?;
    if args.reps == 0 {
        return Err(CliError::usage("--reps must be at least 1"));
    }
    let kinds: Vec<PrecondKind> = args.preconds.iter().map(|s| parse_precond(s)).collect::<Result<_>>()?;
    let header: Vec<String> = ["method", "reps", "mean_nll", "sd_nll", "min_nll", "max_nll", "mean_seconds", "fallback"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for kind in kinds {
        let mut nll = Vec::with_capacity(args.reps);
        let mut secs = 0.0;
        let mut fell_back = false;
        for r in 0..args.reps {
            let cfg = EvalConfig { backend: Backend::Krylov, precond: kind, seed: eval.seed + r as u64, ..eval };
            let t = Instant::now();
            let b = evaluate_nll(&design, family, &params, cfg, false)?;
            secs += t.elapsed().as_secs_f64();
            fell_back |= b.diagnostics.zic_fell_back;
            nll.push(b.nll);
        }
        let (m, sd) = mean_sd(&nll);
        let (lo, hi) = nll.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        rows.push(vec![
            kind.name(),
            args.reps.to_string(),
            fmt_f64(m),
            fmt_f64(sd),
            fmt_f64(lo),
            fmt_f64(hi),
            fmt_f64(secs / args.reps as f64),
            fell_back.to_string(),
        ]);
    }
    if design.z.n_cols() <= eval.oracle_cap {
        let t = Instant::now();
        let b = evaluate_nll(&design, family, &params, EvalConfig { backend: Backend::Cholesky, ..eval }, false)?;
        let s = t.elapsed().as_secs_f64();
        rows.push(vec![
            "cholesky".into(),
            "1".into(),
            fmt_f64(b.nll),
            fmt_f64(0.0),
            fmt_f64(b.nll),
            fmt_f64(b.nll),
            fmt_f64(s),
            "false".into(),
        ]);
    }
    write_text(args.out.as_deref(), &csv_text(&header, &rows)?)
}

#[derive(Debug, Serialize)]
struct DesignRecord {
    n: usize,
    level_counts: Vec<usize>,
    d_min: usize,
    d_max: usize,
    d_per_factor: Vec<Option<usize>>,
    balanced: bool,
    pairs_at_most_once: bool,
}

impl From<&DesignMeta> for DesignRecord {
    fn from(d: &DesignMeta) -> Self {
        Self {
            n: d.n,
            level_counts: d.level_counts.clone(),
            d_min: d.d_min,
            d_max: d.d_max,
            d_per_factor: d.d_per_factor.clone(),
            balanced: d.balanced,
            pairs_at_most_once: d.pairs_at_most_once,
        }
    }
}

#[derive(Debug, Serialize)]
struct ReportRecord {
    precond: String,
    lambda_max: f64,
    lambda_2: f64,
    lambda_m_minus_1: f64,
    lambda_min: f64,
    kappa: f64,
    kappa_m1_1: f64,
    kappa_m1_2: f64,
    /// Descending.
    eigenvalues: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct CheckRecord {
    name: String,
    precond: String,
    value: f64,
    lower: Option<f64>,
    upper: Option<f64>,
    verdict: String,
}

#[derive(Debug, Serialize)]
struct SpectrumOutput {
    family: String,
    params: ParamsRecord,
    design: DesignRecord,
    reports: Vec<ReportRecord>,
    skipped: Vec<String>,
    checks: Vec<CheckRecord>,
}

pub fn run_spectrum(args: &SpectrumArgs, file: &FileConfig) -> Result<()> {
    let (data, spec) = resolve_model(&args.model.flags(), &file.model)?;
    let family = spec.family()?;
    let (design, _) = load_training(&data, &spec)?;
    if design.z.n_cols() > SPECTRAL_CAP {
        return Err(CliError::usage(format!(
            "spectra are limited to {SPECTRAL_CAP} random-effect levels, the data has {}",
            design.z.n_cols()
        )));
    }
    let params = params_for(args.params_from.as_deref(), &design, &spec, family)?;
    let seed = args.seed.or(file.estimation.seed).unwrap_or(1);
    let w = match params.error_variance {
        Some(s2) if family == Family::Gaussian => vec![1.0 / s2; design.n()],
        _ => {
            let cfg = EvalConfig { backend: Backend::Cholesky, seed, ..EvalConfig::default() };
            Evaluator::new(&design, family, cfg)?.find_mode(&params)?.derivs.w()
        }
    };
    let m = NormalPattern::new(&design.z).assemble(&w, &params.sigma_inv(&design.z))?;
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for s in &args.preconds {
        let kind = parse_precond(s)?;
        match Preconditioner::build(kind, &m, seed) {
            Ok(p) => reports.push(preconditioned_spectrum(&m, &p, &design.z)?),
            Err(crossre_core::Error::ZicBreakdown { .. }) => skipped.push(kind.name()),
            Err(e) => return Err(e.into()),
        }
    }
    let inputs = BoundInputs {
        m: &m,
        z: &design.z,
        re_variances: &params.re_variances,
        error_variance: if family == Family::Gaussian { params.error_variance } else { None },
    };
    let checks = bound_report(&reports, &inputs);
    let out = SpectrumOutput {
        family: family.name().into(),
        params: (&params).into(),
        design: (&DesignMeta::from_incidence(&design.z)).into(),
        reports: reports
            .iter()
            .map(|r| ReportRecord {
                precond: r.kind.name(),
                lambda_max: r.lambda_max,
                lambda_2: r.lambda_2,
                lambda_m_minus_1: r.lambda_m_minus_1,
                lambda_min: r.lambda_min,
                kappa: r.kappa,
                kappa_m1_1: r.kappa_m1_1,
                kappa_m1_2: r.kappa_m1_2,
                eigenvalues: r.eigenvalues.clone(),
            })
            .collect(),
        skipped,
        checks: checks
            .into_iter()
            .map(|c| CheckRecord {
                name: c.name,
                precond: c.kind.name(),
                value: c.value,
                lower: c.lower,
                upper: c.upper,
                verdict: c.verdict.name().into(),
            })
            .collect(),
    };
    write_json(args.out.as_deref(), &out)
}
