//! Headered CSV datasets.

use std::path::{Path, PathBuf};

use crossre_core::predict::PredictionSpec;
use crossre_core::sparse::build_incidence;
use crossre_core::{Family, GroupedDesign, ReStructure};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Label given to empty and `NA` grouping values.
pub const MISSING_LEVEL: &str = "NA";

/// Column roles: response, fixed-effect covariates and grouping factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub response: String,
    pub fixed: Vec<String>,
    pub groups: Vec<String>,
    pub intercept: bool,
    pub family: String,
}

impl ModelSpec {
    pub fn family(&self) -> Result<Family> {
        Family::parse(&self.family).ok_or_else(|| CliError::usage(format!("unknown likelihood '{}'", self.family)))
    }

    /// Covariate names in design order.
    pub fn beta_names(&self) -> Vec<String> {
        let mut v = Vec::with_capacity(self.fixed.len() + 1);
        if self.intercept {
            v.push("intercept".to_string());
        }
        v.extend(self.fixed.iter().cloned());
        v
    }

    pub fn intercept_col(&self) -> Option<usize> {
        self.intercept.then_some(0)
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    pub path: PathBuf,
    pub headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
    /// One-based source line of each row.
    lines: Vec<u64>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        let headers: Vec<String> = r
            .headers()
            .map_err(|e| CliError::usage(format!("{}: bad header: {e}", path.display())))?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            lines.push(rec.position().map_or(0, |p| p.line()));
            rows.push(rec);
        }
        if rows.is_empty() {
            return Err(CliError::usage(format!("{}: no data rows", path.display())));
        }
        Ok(Self { path: path.to_path_buf(), headers, rows, lines })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::usage(format!(
                "unknown column '{name}' in {} (columns: {})",
                self.path.display(),
                self.headers.join(", ")
            ))
        })
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(r, line)| {
                let s = r.get(c).unwrap_or("");
                s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    CliError::usage(format!(
                        "{}:{line}: column '{name}': '{s}' is not a finite number",
                        self.path.display()
                    ))
                })
            })
            .collect()
    }

    /// Categorical column; empty and `NA` values map to one extra level.
    pub fn labels(&self, name: &str) -> Result<Vec<String>> {
        let c = self.column_index(name)?;
        Ok(self
            .rows
            .iter()
            .map(|r| match r.get(c).unwrap_or("") {
                "" | "NA" => MISSING_LEVEL.to_string(),
                s => s.to_string(),
            })
            .collect())
    }

    /// Row-major covariates `[1, x_1, …]`.
    pub fn covariates(&self, spec: &ModelSpec) -> Result<(Vec<f64>, usize)> {
        let cols: Vec<Vec<f64>> = spec.fixed.iter().map(|f| self.numeric(f)).collect::<Result<_>>()?;
        let p = cols.len() + usize::from(spec.intercept);
        if p == 0 {
            return Err(CliError::usage("the model needs an intercept or at least one fixed-effect column"));
        }
        let mut x = Vec::with_capacity(self.len() * p);
        for i in 0..self.len() {
            if spec.intercept {
                x.push(1.0);
            }
            x.extend(cols.iter().map(|c| c[i]));
        }
        Ok((x, p))
    }

    pub fn response(&self, spec: &ModelSpec) -> Result<Vec<f64>> {
        let y = self.numeric(&spec.response)?;
        if spec.family()? == Family::Bernoulli {
            if let Some(i) = y.iter().position(|v| *v != 0.0 && *v != 1.0) {
                return Err(CliError::usage(format!(
                    "{}:{}: column '{}': Bernoulli responses must be 0 or 1, got {}",
                    self.path.display(),
                    self.lines[i],
                    spec.response,
                    y[i]
                )));
            }
        }
        Ok(y)
    }

    pub fn group_labels(&self, spec: &ModelSpec) -> Result<Vec<Vec<String>>> {
        if spec.groups.is_empty() {
            return Err(CliError::usage("at least one grouping column is required"));
        }
        spec.groups.iter().map(|g| self.labels(g)).collect()
    }

    /// Checks every column the model names before any parsing.
    pub fn check_columns(&self, spec: &ModelSpec, with_response: bool) -> Result<()> {
        if with_response {
            self.column_index(&spec.response)?;
        }
        for c in spec.fixed.iter().chain(&spec.groups) {
            self.column_index(c)?;
        }
        Ok(())
    }
}

/// Training design and its level dictionaries.
pub fn design_from_table(table: &Table, spec: &ModelSpec) -> Result<(GroupedDesign, ReStructure)> {
    table.check_columns(spec, true)?;
    let y = table.response(spec)?;
    let (x, p) = table.covariates(spec)?;
    let labels = table.group_labels(spec)?;
    let (z, structure) = build_incidence(&labels, table.len())?;
    let mut design = GroupedDesign::new(y, x, p, z)?.with_structure(structure.clone());
    design.covariate_names = spec.beta_names();
    Ok((design, structure))
}

/// Prediction rows of `table` against a training structure; labels unseen in
/// training become new levels.
pub fn prediction_spec(
    table: &Table,
    spec: &ModelSpec,
    design: &GroupedDesign,
    structure: &ReStructure,
) -> Result<PredictionSpec> {
    table.check_columns(spec, false)?;
    let (x, p) = table.covariates(spec)?;
    let labels = table.group_labels(spec)?;
    Ok(PredictionSpec::from_labels(structure, &design.z, &labels, x, p)?)
}
