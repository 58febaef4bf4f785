use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{EstimationFlags, ModelFlags, PredictionFlags, SimulationFlags};

#[derive(Debug, Parser)]
#[command(name = "crossre", version, about = "Mixed models with crossed random effects via preconditioned Krylov methods")]
pub struct Cli {
    /// TOML file with defaults for any flag; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for probe-level parallelism.
    #[arg(long, global = true, env = "CROSSRE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset with crossed random effects.
    Simulate(SimulateArgs),
    /// Estimate variance components and fixed effects.
    Fit(FitArgs),
    /// Predictive means and variances for new rows.
    Predict(PredictArgs),
    /// Re-evaluate the likelihood under several preconditioners.
    BenchPrecond(BenchArgs),
    /// Exact preconditioned spectra and bound checks.
    Spectrum(SpectrumArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Directory receiving the dataset CSV files and truth.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    /// Levels per grouping factor, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub re_variances: Option<Vec<f64>>,
    #[arg(long)]
    pub error_variance: Option<f64>,
    #[arg(long)]
    pub family: Option<String>,
    /// balanced, biregular or random.
    #[arg(long)]
    pub design: Option<String>,
    /// Covariates besides the intercept.
    #[arg(long)]
    pub covariates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rows held out into test.csv; zero writes a single data.csv.
    #[arg(long)]
    pub test_size: Option<usize>,
}

impl SimulateArgs {
    pub fn flags(&self) -> SimulationFlags {
        SimulationFlags {
            n: self.n,
            levels: self.levels.clone(),
            re_variances: self.re_variances.clone(),
            error_variance: self.error_variance,
            family: self.family.clone(),
            design: self.design.clone(),
            covariates: self.covariates,
            seed: self.seed,
            test_size: self.test_size,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Training CSV.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub response: Option<String>,
    /// Fixed-effect columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub fixed: Option<Vec<String>>,
    /// Grouping columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub groups: Option<Vec<String>>,
    #[arg(long)]
    pub intercept: Option<bool>,
    /// gaussian or bernoulli.
    #[arg(long)]
    pub family: Option<String>,
}

impl ModelArgs {
    pub fn flags(&self) -> ModelFlags {
        ModelFlags {
            data: self.data.clone(),
            response: self.response.clone(),
            fixed: self.fixed.clone(),
            groups: self.groups.clone(),
            intercept: self.intercept,
            family: self.family.clone(),
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct EstimationArgs {
    /// krylov or cholesky.
    #[arg(long)]
    pub backend: Option<String>,
    /// ssor, zic, diagonal, none, pivchol[:k] or lanczos[:k].
    #[arg(long)]
    pub precond: Option<String>,
    /// Probe vectors for log-determinants and traces.
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    #[arg(long)]
    pub cg_max_iter: Option<usize>,
    #[arg(long)]
    pub solve_tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    pub fisher_scoring: Option<bool>,
    #[arg(long)]
    pub std_errors: Option<bool>,
    #[arg(long)]
    pub oracle_cap: Option<usize>,
}

impl EstimationArgs {
    pub fn flags(&self) -> EstimationFlags {
        EstimationFlags {
            backend: self.backend.clone(),
            precond: self.precond.clone(),
            probes: self.probes,
            seed: self.seed,
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
            solve_tol: self.solve_tol,
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            fisher_scoring: self.fisher_scoring,
            std_errors: self.std_errors,
            oracle_cap: self.oracle_cap,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Leave out wall-clock fields so reruns are byte-identical.
    #[arg(long)]
    pub omit_timing: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Fit JSON written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Training CSV; defaults to the data path recorded in the fit.
    #[arg(long)]
    pub data: Option<String>,
    /// CSV with the rows to predict.
    #[arg(long)]
    pub new: PathBuf,
    /// exact, alg1 (stochastic-diag), alg2 (simulation-normal), alg3 (simulation-psi) or lanczos.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub pred_seed: Option<u64>,
    #[arg(long)]
    pub pred_cg_tol: Option<f64>,
    #[arg(long)]
    pub quadrature_points: Option<usize>,
    #[arg(long)]
    pub control_variate: Option<bool>,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    /// Column of `new` holding the true random-effect sum; enables scoring.
    #[arg(long)]
    pub truth_column: Option<String>,
    /// Per-row CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score JSON (requires --truth-column).
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

impl PredictArgs {
    pub fn flags(&self) -> PredictionFlags {
        PredictionFlags {
            method: self.method.clone(),
            samples: self.samples,
            rank: self.rank,
            seed: self.pred_seed,
            cg_tol: self.pred_cg_tol,
            quadrature_points: self.quadrature_points,
            control_variate: self.control_variate,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    /// Preconditioners to compare, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "ssor,zic,diagonal,none")]
    pub preconds: Vec<String>,
    /// Re-seeded evaluations per preconditioner.
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    /// Evaluate at the estimates of this fit JSON instead of the initial values.
    #[arg(long)]
    pub params_from: Option<PathBuf>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Preconditioners to analyze, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "ssor,diagonal,none")]
    pub preconds: Vec<String>,
    /// Parameters from this fit JSON instead of the initial values.
    #[arg(long)]
    pub params_from: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
