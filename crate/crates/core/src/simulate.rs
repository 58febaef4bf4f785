//! Synthetic crossed random effects datasets, train/test splits and
//! prediction scores.
//!
//! Covariates are `N(0, v)` with `v = Σσ_k² / p` so that the fixed-effect
//! variance equals the total random-effect variance; `β = (0, 1, …, 1)`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::likelihood::{sigmoid, Family};
use crate::model::{GroupedDesign, ModelParams};
use crate::predict::{PredictionSpec, PredictiveDist};
use crate::probes::{stream_rng, Domain};
use crate::sparse::Incidence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    /// Every level of factor `k` occurs exactly `n / m_k` times, in random order.
    Balanced,
    /// Balanced with two factors and no level pair occurring twice.
    Biregular,
    /// Levels drawn uniformly at random.
    Random,
}

impl DesignKind {
    pub fn name(self) -> &'static str {
        match self {
            DesignKind::Balanced => "balanced",
            DesignKind::Biregular => "biregular",
            DesignKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "balanced" => Some(DesignKind::Balanced),
            "biregular" => Some(DesignKind::Biregular),
            "random" | "unbalanced" => Some(DesignKind::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    /// Levels `m_k` per factor.
    pub levels: Vec<usize>,
    pub re_variances: Vec<f64>,
    /// Gaussian only.
    pub error_variance: f64,
    pub family: Family,
    pub design: DesignKind,
    /// Covariates besides the intercept.
    pub n_covariates: usize,
    pub seed: u64,
}

impl SimConfig {
    /// Two crossed factors with `m/2` levels each, `σ_k² = σ² = 0.25`,
    /// five covariates.
    pub fn crossed(n: usize, m: usize, family: Family, design: DesignKind, seed: u64) -> Self {
        Self {
            n,
            levels: vec![m / 2, m / 2],
            re_variances: vec![0.25, 0.25],
            error_variance: 0.25,
            family,
            design,
            n_covariates: 5,
            seed,
        }
    }

    /// Two factors with `m_2 = m_1 / 2` and uniformly drawn levels.
    pub fn unbalanced(n: usize, m1: usize, family: Family, seed: u64) -> Self {
        Self {
            n,
            levels: vec![m1, m1 / 2],
            re_variances: vec![0.25, 0.25],
            error_variance: 0.25,
            family,
            design: DesignKind::Random,
            n_covariates: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidInput("sample size must be positive".into()));
        }
        if self.levels.is_empty() || self.levels.len() != self.re_variances.len() {
            return Err(Error::DimensionMismatch { expected: self.levels.len(), found: self.re_variances.len() });
        }
        if let Some(k) = self.levels.iter().position(|&m| m == 0) {
            return Err(Error::EmptyFactor { factor: k });
        }
        for (index, &v) in self.re_variances.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::NonPositive { index, value: v });
            }
        }
        if self.family == Family::Gaussian && !(self.error_variance > 0.0) {
            return Err(Error::NonPositive { index: self.levels.len(), value: self.error_variance });
        }
        match self.design {
            DesignKind::Balanced | DesignKind::Biregular => {
                if let Some(k) = self.levels.iter().position(|&m| self.n % m != 0) {
                    return Err(Error::InvalidInput(format!(
                        "balanced design needs every level count to divide n; factor {k} has {} levels for n = {}",
                        self.levels[k], self.n
                    )));
                }
                if self.design == DesignKind::Biregular {
                    if self.levels.len() != 2 {
                        return Err(Error::InvalidInput("biregular designs have exactly two factors".into()));
                    }
                    if self.n > self.levels[0] * self.levels[1] {
                        return Err(Error::InvalidInput("biregular design needs n ≤ m_1 m_2".into()));
                    }
                }
            }
            DesignKind::Random => {}
        }
        Ok(())
    }

    pub fn beta(&self) -> Vec<f64> {
        let mut b = vec![1.0; self.n_covariates + 1];
        b[0] = 0.0;
        b
    }
}

/// Data-generating values.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub params: ModelParams,
    /// Effects per factor, indexed by level code.
    pub effects: Vec<Vec<f64>>,
    /// `Zb` per row.
    pub re_effect: Vec<f64>,
    /// `Xβ + Zb` per row.
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub design: GroupedDesign,
    /// Level code per factor and row; codes run over `0..m_k`.
    pub codes: Vec<Vec<usize>>,
    /// Column of each code within its factor block, `None` for absent codes.
    pub level_of_code: Vec<Vec<Option<usize>>>,
    pub truth: Truth,
    pub family: Family,
}

/// Incidence with levels numbered by first appearance of their codes.
pub fn incidence_from_codes(codes: &[Vec<usize>], max_codes: &[usize]) -> Result<(Incidence, Vec<Vec<Option<usize>>>)> {
    let mut maps = Vec::with_capacity(codes.len());
    let mut idx = Vec::with_capacity(codes.len());
    let mut counts = Vec::with_capacity(codes.len());
    for (col, &mk) in codes.iter().zip(max_codes) {
        let mut map = vec![None; mk];
        let mut next = 0;
        let mut lev = Vec::with_capacity(col.len());
        for &c in col {
            if c >= mk {
                return Err(Error::InvalidInput(format!("level code {c} out of range")));
            }
            let l = *map[c].get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            lev.push(l);
        }
        maps.push(map);
        idx.push(lev);
        counts.push(next);
    }
    Ok((Incidence::from_level_indices(&counts, &idx)?, maps))
}

fn balanced_codes(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    let d = n / m;
    let mut v: Vec<usize> = (0..n).map(|i| i / d).collect();
    v.shuffle(rng);
    v
}

/// Configuration model for a biregular bipartite design: factor 1 stubs in
/// blocks, factor 2 stubs shuffled, then repeated pairs removed by random
/// swaps of factor 2 stubs.
fn biregular_codes(rng: &mut ChaCha8Rng, n: usize, m1: usize, m2: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let d1 = n / m1;
    let a: Vec<usize> = (0..n).map(|i| i / d1).collect();
    let mut b = balanced_codes(rng, n, m2);
    let mut count = BTreeSet::new();
    let mut dup = Vec::new();
    let mut is_dup = vec![false; n];
    for i in 0..n {
        if !count.insert((a[i], b[i])) {
            dup.push(i);
            is_dup[i] = true;
        }
    }
    let max_attempts = 1000 * (n + 10);
    let mut attempts = 0;
    while let Some(&i) = dup.last() {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidInput("could not build a design without repeated level pairs".into()));
        }
        let j = rng.random_range(0..n);
        if is_dup[j] || a[i] == a[j] || b[i] == b[j] {
            continue;
        }
        // Row i holds a repeated pair, row j a unique one; swapping must give
        // two pairs absent from the set.
        if count.contains(&(a[i], b[j])) || count.contains(&(a[j], b[i])) {
            continue;
        }
        count.remove(&(a[j], b[j]));
        b.swap(i, j);
        count.insert((a[i], b[i]));
        count.insert((a[j], b[j]));
        is_dup[i] = false;
        dup.pop();
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok((perm.iter().map(|&r| a[r]).collect(), perm.iter().map(|&r| b[r]).collect()))
}

pub fn simulate_dataset(cfg: &SimConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let n = cfg.n;
    let k = cfg.levels.len();
    let mut rng = stream_rng(cfg.seed, Domain::Simulation, 0);
    let codes: Vec<Vec<usize>> = match cfg.design {
        DesignKind::Balanced => cfg.levels.iter().map(|&m| balanced_codes(&mut rng, n, m)).collect(),
        DesignKind::Biregular => {
            let (a, b) = biregular_codes(&mut rng, n, cfg.levels[0], cfg.levels[1])?;
            vec![a, b]
        }
        DesignKind::Random => cfg.levels.iter().map(|&m| (0..n).map(|_| rng.random_range(0..m)).collect()).collect(),
    };
    let effects: Vec<Vec<f64>> = cfg
        .levels
        .iter()
        .zip(&cfg.re_variances)
        .map(|(&m, &v)| (0..m).map(|_| v.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let p = cfg.n_covariates + 1;
    let total_re: f64 = cfg.re_variances.iter().sum();
    let cov_sd = if cfg.n_covariates > 0 { (total_re / cfg.n_covariates as f64).sqrt() } else { 0.0 };
    let mut x = Vec::with_capacity(n * p);
    for _ in 0..n {
        x.push(1.0);
        for _ in 0..cfg.n_covariates {
            x.push(cov_sd * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let beta = cfg.beta();
    let re_effect: Vec<f64> = (0..n).map(|i| (0..k).map(|f| effects[f][codes[f][i]]).sum()).collect();
    let latent: Vec<f64> = (0..n)
        .map(|i| x[i * p..(i + 1) * p].iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + re_effect[i])
        .collect();
    let y: Vec<f64> = match cfg.family {
        Family::Gaussian => {
            let sd = cfg.error_variance.sqrt();
            latent.iter().map(|mu| mu + sd * rng.sample::<f64, _>(StandardNormal)).collect()
        }
        Family::Bernoulli => {
            latent.iter().map(|mu| if rng.random::<f64>() < sigmoid(*mu) { 1.0 } else { 0.0 }).collect()
        }
    };
    let (z, level_of_code) = incidence_from_codes(&codes, &cfg.levels)?;
    let mut design = GroupedDesign::new(y, x, p, z)?;
    design.covariate_names = covariate_names(cfg.n_covariates);
    let params = ModelParams {
        re_variances: cfg.re_variances.clone(),
        error_variance: if cfg.family == Family::Gaussian { Some(cfg.error_variance) } else { None },
        beta,
    };
    Ok(SimDataset {
        design,
        codes,
        level_of_code,
        truth: Truth { params, effects, re_effect, latent },
        family: cfg.family,
    })
}

pub fn covariate_names(n_covariates: usize) -> Vec<String> {
    let mut v = vec![String::from("intercept")];
    v.extend((1..=n_covariates).map(|j| format!("x{j}")));
    v
}

/// Training design and prediction rows of a random observation split.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: GroupedDesign,
    pub spec: PredictionSpec,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub test_y: Vec<f64>,
    /// `Z_po b + Z_pp b_p` per test row.
    pub test_re: Vec<f64>,
    pub test_latent: Vec<f64>,
}

/// Splits observations uniformly at random; `n_test` rows go to the test set.
pub fn split(ds: &SimDataset, n_test: usize, seed: u64) -> Result<SplitData> {
    let n = ds.design.n();
    if n_test == 0 || n_test >= n {
        return Err(Error::InvalidInput(format!("test size {n_test} must be in 1..{n}")));
    }
    let mut rng = stream_rng(seed, Domain::Split, 0);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut test_rows = perm[..n_test].to_vec();
    let mut train_rows = perm[n_test..].to_vec();
    test_rows.sort_unstable();
    train_rows.sort_unstable();
    let k = ds.codes.len();
    let train_codes: Vec<Vec<usize>> = (0..k).map(|f| train_rows.iter().map(|&r| ds.codes[f][r]).collect()).collect();
    let test_codes: Vec<Vec<usize>> = (0..k).map(|f| test_rows.iter().map(|&r| ds.codes[f][r]).collect()).collect();
    let max_codes: Vec<usize> = ds.level_of_code.iter().map(Vec::len).collect();
    let (z, maps) = incidence_from_codes(&train_codes, &max_codes)?;
    let p = ds.design.p;
    let mut xt = Vec::with_capacity(train_rows.len() * p);
    for &r in &train_rows {
        xt.extend_from_slice(ds.design.x_row(r));
    }
    let mut train = GroupedDesign::new(train_rows.iter().map(|&r| ds.design.y[r]).collect(), xt, p, z)?;
    train.covariate_names = ds.design.covariate_names.clone();
    let mut xp = Vec::with_capacity(n_test * p);
    for &r in &test_rows {
        xp.extend_from_slice(ds.design.x_row(r));
    }
    let spec = PredictionSpec::from_codes(&train.z, &test_codes, &maps, xp, p)?;
    Ok(SplitData {
        train,
        spec,
        test_y: test_rows.iter().map(|&r| ds.design.y[r]).collect(),
        test_re: test_rows.iter().map(|&r| ds.truth.re_effect[r]).collect(),
        test_latent: test_rows.iter().map(|&r| ds.truth.latent[r]).collect(),
        train_rows,
        test_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionScores {
    pub rmse: f64,
    /// Negative mean Gaussian log-density of the truth.
    pub log_score: f64,
}

/// RMSE and log score of the random-effect predictions `Z_po b̄` with
/// variances `var_p` against the true `Z_po b + Z_pp b_p`. A zero variance
/// with a mismatch gives an infinite log score.
pub fn evaluate_predictions(truth_re: &[f64], dist: &PredictiveDist) -> Result<PredictionScores> {
    score_values(truth_re, &dist.re_mean, &dist.var)
}

pub fn score_values(truth: &[f64], mean: &[f64], var: &[f64]) -> Result<PredictionScores> {
    let n = truth.len();
    if mean.len() != n || var.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: mean.len().min(var.len()) });
    }
    if n == 0 {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    let mut se = 0.0;
    let mut ls = 0.0;
    for i in 0..n {
        let e = truth[i] - mean[i];
        se += e * e;
        ls += if var[i] > 0.0 {
            0.5 * (2.0 * PI * var[i]).ln() + 0.5 * e * e / var[i]
        } else if e == 0.0 {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        };
    }
    Ok(PredictionScores { rmse: (se / n as f64).sqrt(), log_score: ls / n as f64 })
}
