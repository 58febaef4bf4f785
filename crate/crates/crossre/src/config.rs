//! Run configuration. Command-line flags override config-file keys, which
//! override the defaults.

use std::fs;
use std::path::Path;

use crossre_core::{
    Backend, CgConfig, DesignKind, EvalConfig, Family, OptimConfig, PrecondKind, PredictConfig, SimConfig,
    VarianceMethod,
};
use serde::Deserialize;

use crate::data::ModelSpec;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub estimation: EstimationSection,
    pub prediction: PredictionSection,
    pub simulation: SimulationSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub data: Option<String>,
    pub response: Option<String>,
    pub fixed: Option<Vec<String>>,
    pub groups: Option<Vec<String>>,
    pub intercept: Option<bool>,
    pub family: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    pub backend: Option<String>,
    pub precond: Option<String>,
    pub probes: Option<usize>,
    pub seed: Option<u64>,
    pub cg_tol: Option<f64>,
    pub cg_max_iter: Option<usize>,
    pub solve_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
    pub fisher_scoring: Option<bool>,
    pub std_errors: Option<bool>,
    pub oracle_cap: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionSection {
    pub method: Option<String>,
    pub samples: Option<usize>,
    pub rank: Option<usize>,
    pub seed: Option<u64>,
    pub cg_tol: Option<f64>,
    pub quadrature_points: Option<usize>,
    pub control_variate: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n: Option<usize>,
    pub levels: Option<Vec<usize>>,
    pub re_variances: Option<Vec<f64>>,
    pub error_variance: Option<f64>,
    pub family: Option<String>,
    pub design: Option<String>,
    pub covariates: Option<usize>,
    pub seed: Option<u64>,
    pub test_size: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

/// First present value: flag, then file, then default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn required<T>(flag: Option<T>, file: Option<T>, what: &str) -> Result<T> {
    flag.or(file).ok_or_else(|| CliError::usage(format!("missing required setting: {what}")))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelFlags {
    pub data: Option<String>,
    pub response: Option<String>,
    pub fixed: Option<Vec<String>>,
    pub groups: Option<Vec<String>>,
    pub intercept: Option<bool>,
    pub family: Option<String>,
}

pub fn resolve_model(flags: &ModelFlags, file: &ModelSection) -> Result<(String, ModelSpec)> {
    let data = required(flags.data.clone(), file.data.clone(), "data (--data)")?;
    let spec = ModelSpec {
        response: required(flags.response.clone(), file.response.clone(), "response column (--response)")?,
        fixed: pick(flags.fixed.clone(), file.fixed.clone(), Vec::new()),
        groups: required(flags.groups.clone(), file.groups.clone(), "grouping columns (--groups)")?,
        intercept: pick(flags.intercept, file.intercept, true),
        family: pick(flags.family.clone(), file.family.clone(), "gaussian".into()),
    };
    spec.family()?;
    Ok((data, spec))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimationFlags {
    pub backend: Option<String>,
    pub precond: Option<String>,
    pub probes: Option<usize>,
    pub seed: Option<u64>,
    pub cg_tol: Option<f64>,
    pub cg_max_iter: Option<usize>,
    pub solve_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub grad_tol: Option<f64>,
    pub fisher_scoring: Option<bool>,
    pub std_errors: Option<bool>,
    pub oracle_cap: Option<usize>,
}

pub fn parse_backend(s: &str) -> Result<Backend> {
    Backend::parse(s).ok_or_else(|| CliError::usage(format!("unknown backend '{s}' (expected krylov or cholesky)")))
}

pub fn parse_precond(s: &str) -> Result<PrecondKind> {
    PrecondKind::parse(s).map_err(|e| CliError::usage(e.to_string()))
}

fn positive(v: f64, what: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::usage(format!("{what} must be positive, got {v}")))
    }
}

pub fn resolve_estimation(flags: &EstimationFlags, file: &EstimationSection) -> Result<(EvalConfig, OptimConfig)> {
    let d = EvalConfig::default();
    let o = OptimConfig::default();
    let backend = match flags.backend.as_deref().or(file.backend.as_deref()) {
        Some(s) => parse_backend(s)?,
        None => d.backend,
    };
    let precond = match flags.precond.as_deref().or(file.precond.as_deref()) {
        Some(s) => parse_precond(s)?,
        None => d.precond,
    };
    let probes = pick(flags.probes, file.probes, d.num_probes);
    if probes == 0 {
        return Err(CliError::usage("probes must be at least 1"));
    }
    let eval = EvalConfig {
        backend,
        precond,
        num_probes: probes,
        seed: pick(flags.seed, file.seed, d.seed),
        cg: CgConfig {
            tol: positive(pick(flags.cg_tol, file.cg_tol, d.cg.tol), "cg tolerance")?,
            max_iter: pick(flags.cg_max_iter, file.cg_max_iter, d.cg.max_iter),
        },
        solve_rel_tol: positive(pick(flags.solve_tol, file.solve_tol, d.solve_rel_tol), "solve tolerance")?,
        oracle_cap: pick(flags.oracle_cap, file.oracle_cap, d.oracle_cap),
        ..d
    };
    let optim = OptimConfig {
        max_iter: pick(flags.max_iter, file.max_iter, o.max_iter),
        grad_tol: positive(pick(flags.grad_tol, file.grad_tol, o.grad_tol), "gradient tolerance")?,
        fisher_scoring: pick(flags.fisher_scoring, file.fisher_scoring, o.fisher_scoring),
        std_errors: pick(flags.std_errors, file.std_errors, o.std_errors),
        ..o
    };
    Ok((eval, optim))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionFlags {
    pub method: Option<String>,
    pub samples: Option<usize>,
    pub rank: Option<usize>,
    pub seed: Option<u64>,
    pub cg_tol: Option<f64>,
    pub quadrature_points: Option<usize>,
    pub control_variate: Option<bool>,
}

pub fn resolve_prediction(flags: &PredictionFlags, file: &PredictionSection) -> Result<PredictConfig> {
    let d = PredictConfig::default();
    let method = match flags.method.as_deref().or(file.method.as_deref()) {
        Some(s) => VarianceMethod::parse(s).ok_or_else(|| {
            CliError::usage(format!(
                "unknown prediction method '{s}' (expected exact, alg1, alg2, alg3 or lanczos)"
            ))
        })?,
        None => d.method,
    };
    Ok(PredictConfig {
        method,
        samples: pick(flags.samples, file.samples, d.samples),
        lanczos_rank: pick(flags.rank, file.rank, d.lanczos_rank),
        seed: pick(flags.seed, file.seed, d.seed),
        cg: CgConfig { tol: positive(pick(flags.cg_tol, file.cg_tol, d.cg.tol), "prediction cg tolerance")?, ..d.cg },
        quadrature_points: pick(flags.quadrature_points, file.quadrature_points, d.quadrature_points),
        control_variate: pick(flags.control_variate, file.control_variate, d.control_variate),
        ..d
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulationFlags {
    pub n: Option<usize>,
    pub levels: Option<Vec<usize>>,
    pub re_variances: Option<Vec<f64>>,
    pub error_variance: Option<f64>,
    pub family: Option<String>,
    pub design: Option<String>,
    pub covariates: Option<usize>,
    pub seed: Option<u64>,
    pub test_size: Option<usize>,
}

/// Simulation settings and the number of held-out rows.
pub fn resolve_simulation(flags: &SimulationFlags, file: &SimulationSection) -> Result<(SimConfig, usize)> {
    let levels = pick(flags.levels.clone(), file.levels.clone(), vec![500, 500]);
    let k = levels.len();
    let family_s = pick(flags.family.clone(), file.family.clone(), "gaussian".into());
    let family = Family::parse(&family_s).ok_or_else(|| CliError::usage(format!("unknown likelihood '{family_s}'")))?;
    let design_s = pick(flags.design.clone(), file.design.clone(), "random".into());
    let design = DesignKind::parse(&design_s).ok_or_else(|| {
        CliError::usage(format!("unknown design '{design_s}' (expected balanced, biregular or random)"))
    })?;
    let cfg = SimConfig {
        n: pick(flags.n, file.n, 5000),
        re_variances: pick(flags.re_variances.clone(), file.re_variances.clone(), vec![0.25; k]),
        levels,
        error_variance: pick(flags.error_variance, file.error_variance, 0.25),
        family,
        design,
        n_covariates: pick(flags.covariates, file.covariates, 5),
        seed: pick(flags.seed, file.seed, 1),
    };
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok((cfg, pick(flags.test_size, file.test_size, 0)))
}
