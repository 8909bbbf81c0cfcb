//! Instrument propensity score `Pr(Z = 1 | X)` by probit maximum likelihood.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linkage::{EvaluationSample, Gender, Nationality};
use crate::normal;

/// Fitted probabilities are clamped into `[PSCORE_FLOOR, 1 - PSCORE_FLOOR]`.
pub const PSCORE_FLOOR: f64 = 1e-12;

/// Coefficient norm beyond which a non-vanishing gradient signals separation.
const SEPARATION_NORM: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropensityError {
    #[error("empty sample")]
    EmptySample,
    #[error("column `{0}` is identically zero")]
    AllZeroColumn(String),
    #[error("collinear design columns: {}", .columns.join(", "))]
    Collinear { columns: Vec<String> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("instrument is not binary at row {0}")]
    NonBinary(usize),
    #[error("perfect separation on column `{column}` (coefficient norm {norm:.1})")]
    Separation { column: String, norm: f64 },
    #[error(
        "probit did not converge after {iterations} iterations (gradient max-norm {gradient_norm:.3e}, log-likelihood {log_likelihood:.6})"
    )]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
        log_likelihood: f64,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("fit is not converged")]
    Unconverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateMode {
    /// One-hot lottery-year dummies without intercept (saturated).
    YearDummiesOnly,
    /// Intercept, year dummies against the earliest year, age, gender,
    /// nationality and missing-value dummies.
    YearPlusDemographics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub mode: CovariateMode,
    /// Year levels; `None` uses the years present in the sample.
    pub years: Option<Vec<i32>>,
}

impl CovariateSpec {
    pub fn year_dummies() -> Self {
        Self {
            mode: CovariateMode::YearDummiesOnly,
            years: None,
        }
    }

    pub fn with_demographics() -> Self {
        Self {
            mode: CovariateMode::YearPlusDemographics,
            years: None,
        }
    }
}

/// Dense row-major design with one row per participant.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: Vec<f64>,
    n_rows: usize,
    labels: Vec<String>,
    row_ids: Vec<String>,
    dropped: Vec<String>,
}

impl DesignMatrix {
    /// Build from rows, rejecting zero columns and rank deficiency.
    pub fn from_rows(labels: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, PropensityError> {
        let n_cols = labels.len();
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_cols {
                return Err(PropensityError::Dimension(format!(
                    "row {i} has {} entries, expected {n_cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        let row_ids = (0..rows.len()).map(|i| i.to_string()).collect();
        let design = Self {
            values,
            n_rows: rows.len(),
            labels,
            row_ids,
            dropped: Vec::new(),
        };
        design.validate()?;
        Ok(design)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Participant identifiers, one per row.
    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    /// Optional columns left out because they were identically zero.
    pub fn dropped_columns(&self) -> &[String] {
        &self.dropped
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.n_cols();
        &self.values[i * k..(i + 1) * k]
    }

    fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_rows).map(move |i| self.values[i * self.n_cols() + j])
    }

    fn validate(&self) -> Result<(), PropensityError> {
        if self.n_rows == 0 {
            return Err(PropensityError::EmptySample);
        }
        for (j, label) in self.labels.iter().enumerate() {
            if self.column(j).all(|v| v == 0.0) {
                return Err(PropensityError::AllZeroColumn(label.clone()));
            }
        }
        let dependent = dependent_columns(self);
        if !dependent.is_empty() {
            return Err(PropensityError::Collinear {
                columns: dependent
                    .into_iter()
                    .map(|j| self.labels[j].clone())
                    .collect(),
            });
        }
        Ok(())
    }

    /// Compressed sparse rows: (row starts, column indices, values).
    fn sparse_rows(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let k = self.n_cols();
        let mut starts = Vec::with_capacity(self.n_rows + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        starts.push(0);
        for i in 0..self.n_rows {
            for (j, &v) in self.values[i * k..(i + 1) * k].iter().enumerate() {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            starts.push(cols.len());
        }
        (starts, cols, vals)
    }
}

/// Columns that are linear combinations of earlier ones (modified Gram-Schmidt).
fn dependent_columns(design: &DesignMatrix) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..design.n_cols() {
        let mut v: Vec<f64> = design.column(j).collect();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for q in &basis {
            let proj: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= proj * qi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-9 * norm0.max(1.0) {
            dependent.push(j);
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    dependent
}

/// Participant-level design matrix for the propensity model.
///
/// Missing demographics enter as value 0 plus a missing dummy. In
/// demographic mode, reference categories are the earliest year, male and
/// nationality OTHER; optional demographic columns that are identically zero
/// in the sample are dropped and listed in [`DesignMatrix::dropped_columns`].
pub fn build_design(
    sample: &EvaluationSample,
    spec: &CovariateSpec,
) -> Result<DesignMatrix, PropensityError> {
    if sample.is_empty() {
        return Err(PropensityError::EmptySample);
    }
    let years: Vec<i32> = match &spec.years {
        Some(y) => {
            let set: BTreeSet<i32> = y.iter().copied().collect();
            set.into_iter().collect()
        }
        None => {
            let set: BTreeSet<i32> = sample.participants.iter().map(|p| p.t0).collect();
            set.into_iter().collect()
        }
    };
    if let Some(p) = sample.participants.iter().find(|p| !years.contains(&p.t0)) {
        return Err(PropensityError::Dimension(format!(
            "participant year {} not among the year levels",
            p.t0
        )));
    }

    // (label, values, optional)
    let mut columns: Vec<(String, Vec<f64>, bool)> = Vec::new();
    let indicator = |f: &dyn Fn(&crate::linkage::Participant) -> bool| -> Vec<f64> {
        sample
            .participants
            .iter()
            .map(|p| if f(p) { 1.0 } else { 0.0 })
            .collect()
    };

    let year_levels: &[i32] = match spec.mode {
        CovariateMode::YearDummiesOnly => &years,
        CovariateMode::YearPlusDemographics => {
            columns.push(("intercept".into(), vec![1.0; sample.len()], false));
            years.get(1..).unwrap_or(&[])
        }
    };
    for &y in year_levels {
        columns.push((format!("year_{y}"), indicator(&|p| p.t0 == y), false));
    }

    if spec.mode == CovariateMode::YearPlusDemographics {
        let age: Vec<f64> = sample
            .participants
            .iter()
            .map(|p| p.age().map(f64::from).unwrap_or(0.0))
            .collect();
        columns.push(("age".into(), age, true));
        columns.push((
            "age_missing".into(),
            indicator(&|p| p.demographics.birth_year_missing()),
            true,
        ));
        columns.push((
            "female".into(),
            indicator(&|p| p.demographics.gender == Some(Gender::Female)),
            true,
        ));
        columns.push((
            "gender_missing".into(),
            indicator(&|p| p.demographics.gender_missing()),
            true,
        ));
        for nat in Nationality::ALL {
            if nat == Nationality::Other {
                continue;
            }
            columns.push((
                format!("nationality_{}", nat.code()),
                indicator(&|p| p.demographics.nationality == Some(nat)),
                true,
            ));
        }
        columns.push((
            "nationality_missing".into(),
            indicator(&|p| p.demographics.nationality_missing()),
            true,
        ));
    }

    let mut dropped = Vec::new();
    columns.retain(|(label, values, optional)| {
        let zero = values.iter().all(|v| *v == 0.0);
        if zero && *optional {
            dropped.push(label.clone());
        }
        !(zero && *optional)
    });

    let n = sample.len();
    let k = columns.len();
    let mut values = vec![0.0; n * k];
    for (j, (_, col, _)) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            values[i * k + j] = *v;
        }
    }
    let design = DesignMatrix {
        values,
        n_rows: n,
        labels: columns.into_iter().map(|(l, _, _)| l).collect(),
        row_ids: sample
            .participants
            .iter()
            .map(|p| p.cluster_id.clone())
            .collect(),
        dropped,
    };
    design.validate()?;
    Ok(design)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbitOptions {
    /// Convergence threshold on the max-norm of the log-likelihood gradient.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbitFit {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the gradient at the returned coefficients.
    pub gradient_norm: f64,
}

struct Evaluation {
    log_likelihood: f64,
    gradient: Vec<f64>,
    /// Negative Hessian, dense row-major.
    information: Vec<f64>,
}

struct ProbitProblem<'a> {
    starts: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    z: &'a [bool],
    k: usize,
}

impl<'a> ProbitProblem<'a> {
    fn index(&self, i: usize, beta: &[f64]) -> f64 {
        (self.starts[i]..self.starts[i + 1])
            .map(|e| self.vals[e] * beta[self.cols[e]])
            .sum()
    }

    fn log_likelihood(&self, beta: &[f64]) -> f64 {
        (0..self.z.len())
            .map(|i| {
                let q = if self.z[i] { 1.0 } else { -1.0 };
                normal::log_cdf(q * self.index(i, beta))
            })
            .sum()
    }

    fn evaluate(&self, beta: &[f64]) -> Evaluation {
        let k = self.k;
        let mut ll = 0.0;
        let mut gradient = vec![0.0; k];
        let mut information = vec![0.0; k * k];
        for i in 0..self.z.len() {
            let q = if self.z[i] { 1.0 } else { -1.0 };
            let s = q * self.index(i, beta);
            ll += normal::log_cdf(s);
            let lambda = normal::mills(s);
            let w = lambda * (lambda + s);
            let range = self.starts[i]..self.starts[i + 1];
            for a in range.clone() {
                let (ca, va) = (self.cols[a], self.vals[a]);
                gradient[ca] += q * lambda * va;
                for b in range.clone() {
                    let cb = self.cols[b];
                    if cb >= ca {
                        information[ca * k + cb] += w * va * self.vals[b];
                    }
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                information[a * k + b] = information[b * k + a];
            }
        }
        Evaluation {
            log_likelihood: ll,
            gradient,
            information,
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Probit log-likelihood of `z` given `design` at `beta`.
pub fn probit_log_likelihood(design: &DesignMatrix, z: &[bool], beta: &[f64]) -> f64 {
    let (starts, cols, vals) = design.sparse_rows();
    ProbitProblem {
        starts,
        cols,
        vals,
        z,
        k: design.n_cols(),
    }
    .log_likelihood(beta)
}

/// Analytic gradient of [`probit_log_likelihood`].
pub fn probit_gradient(design: &DesignMatrix, z: &[bool], beta: &[f64]) -> Vec<f64> {
    let (starts, cols, vals) = design.sparse_rows();
    ProbitProblem {
        starts,
        cols,
        vals,
        z,
        k: design.n_cols(),
    }
    .evaluate(beta)
    .gradient
}

/// Newton-Raphson probit fit from a zero start with step halving.
///
/// Rows are accumulated in their given order, so a fit is reproducible
/// bit-for-bit for a fixed design.
pub fn fit_probit(
    design: &DesignMatrix,
    z: &[bool],
    opts: ProbitOptions,
) -> Result<ProbitFit, PropensityError> {
    if z.len() != design.n_rows() {
        return Err(PropensityError::Dimension(format!(
            "{} instrument values for {} design rows",
            z.len(),
            design.n_rows()
        )));
    }
    let k = design.n_cols();
    let (starts, cols, vals) = design.sparse_rows();
    let problem = ProbitProblem {
        starts,
        cols,
        vals,
        z,
        k,
    };

    let newton_step = |eval: &Evaluation| -> Result<DVector<f64>, PropensityError> {
        let info = DMatrix::from_row_slice(k, k, &eval.information);
        let grad = DVector::from_column_slice(&eval.gradient);
        match info.clone().cholesky() {
            Some(chol) => Ok(chol.solve(&grad)),
            None => info
                .lu()
                .solve(&grad)
                .ok_or_else(|| PropensityError::Numerical("singular information matrix".into())),
        }
    };
    // worst-case rounding of an n-term sum; near the optimum the true gain
    // of a Newton step is far below it
    let noise_floor = |ll: f64| ll - problem.z.len() as f64 * f64::EPSILON * (1.0 + ll.abs());

    let mut beta = vec![0.0; k];
    let mut eval = problem.evaluate(&beta);
    let mut iterations = 0;
    loop {
        let mut gradient_norm = max_abs(&eval.gradient);
        if gradient_norm <= opts.tol {
            // one polishing step takes the quadratically converging iterate
            // to rounding level; kept only if it helps
            let step = newton_step(&eval)?;
            let candidate: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
            let polished = problem.evaluate(&candidate);
            let polished_norm = max_abs(&polished.gradient);
            if polished.log_likelihood.is_finite()
                && polished.log_likelihood >= noise_floor(eval.log_likelihood)
                && polished_norm < gradient_norm
            {
                beta = candidate;
                eval = polished;
                gradient_norm = polished_norm;
                iterations += 1;
            }
            return Ok(ProbitFit {
                labels: design.labels().to_vec(),
                coefficients: beta,
                log_likelihood: eval.log_likelihood,
                iterations,
                converged: true,
                gradient_norm,
            });
        }
        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if norm > SEPARATION_NORM {
            let worst = (0..k)
                .max_by(|&a, &b| beta[a].abs().total_cmp(&beta[b].abs()))
                .unwrap_or(0);
            return Err(PropensityError::Separation {
                column: design.labels()[worst].clone(),
                norm,
            });
        }
        if iterations >= opts.max_iter {
            return Err(PropensityError::NotConverged {
                iterations,
                gradient_norm,
                log_likelihood: eval.log_likelihood,
            });
        }

        let step = newton_step(&eval)?;
        let floor = noise_floor(eval.log_likelihood);
        let mut t = 1.0;
        let next = loop {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + t * s)
                .collect();
            let ll = problem.log_likelihood(&candidate);
            if ll.is_finite() && ll >= floor {
                break candidate;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(PropensityError::NotConverged {
                    iterations,
                    gradient_norm,
                    log_likelihood: eval.log_likelihood,
                });
            }
        };
        beta = next;
        eval = problem.evaluate(&beta);
        iterations += 1;
    }
}

/// Fitted propensity scores `Φ(x'β)`, clamped away from 0 and 1.
pub fn predict_pscore(fit: &ProbitFit, design: &DesignMatrix) -> Result<Vec<f64>, PropensityError> {
    if !fit.converged {
        return Err(PropensityError::Unconverged);
    }
    if fit.labels != design.labels() {
        return Err(PropensityError::Dimension(format!(
            "fit columns [{}] differ from design columns [{}]",
            fit.labels.join(", "),
            design.labels().join(", ")
        )));
    }
    Ok((0..design.n_rows())
        .map(|i| {
            let xb: f64 = design
                .row(i)
                .iter()
                .zip(&fit.coefficients)
                .map(|(x, b)| x * b)
                .sum();
            clamp_pscore(normal::cdf(xb))
        })
        .collect())
}

pub fn clamp_pscore(p: f64) -> f64 {
    p.clamp(PSCORE_FLOOR, 1.0 - PSCORE_FLOOR)
}
