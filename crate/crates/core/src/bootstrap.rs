//! Cluster bootstrap over participants.
//!
//! Each replicate draws `n` participants with replacement and carries all of
//! their outcome rows, then re-runs the caller's pipeline (propensity refit,
//! trimming and estimation) on the resample. Replicate `b` uses its own
//! ChaCha stream keyed by `(seed, b)`, so the drawn index sets do not depend
//! on the number of worker threads or on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linkage::EvaluationSample;
use crate::normal;

/// Share of failed replicates above which inference is refused.
pub const MAX_FAILED_SHARE: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BootstrapError {
    #[error("invalid bootstrap configuration: {0}")]
    Config(String),
    #[error("need at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("point estimate failed: {0}")]
    Point(String),
    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("only {0} usable replicates; a standard error needs 2")]
    TooFewReplicates(usize),
    #[error("replicate {replicate} returned {got} statistics, expected {expected}")]
    Arity {
        replicate: usize,
        got: usize,
        expected: usize,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replications: usize,
    pub seed: u64,
    pub ci_level: f64,
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,
    pub keep_replicates: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replications: 1999,
            seed: 0,
            ci_level: 0.95,
            threads: None,
            keep_replicates: false,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), BootstrapError> {
        if self.replications == 0 {
            return Err(BootstrapError::Config(
                "replications must be at least 1".into(),
            ));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(BootstrapError::Config(format!(
                "ci_level {} outside (0, 1)",
                self.ci_level
            )));
        }
        if self.threads == Some(0) {
            return Err(BootstrapError::Config("threads must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    /// Normal-approximation interval `estimate ± z·se`.
    pub ci: (f64, f64),
    pub percentile_ci: (f64, f64),
    pub n_replicates: usize,
    pub n_failed_replicates: usize,
    /// Set when `se == 0`; the p-value is then 0 (nonzero estimate) or 1.
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<Vec<f64>>,
}

/// Cluster indices drawn for replicate `replicate`.
pub fn resample_indices(n_clusters: usize, seed: u64, replicate: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    (0..n_clusters)
        .map(|_| rng.random_range(0..n_clusters))
        .collect()
}

/// Builds the resample; a cluster drawn twice appears twice with all rows.
pub fn resample(sample: &EvaluationSample, indices: &[usize]) -> EvaluationSample {
    let mut out = EvaluationSample::from_participants(
        indices
            .iter()
            .map(|&i| sample.participants[i].clone())
            .collect(),
    );
    out.window = sample.window;
    out
}

/// Runs `f` on every replicate. The outer error is a whole-replicate failure.
pub fn replicate_statistics<F, E>(
    sample: &EvaluationSample,
    f: F,
    cfg: &BootstrapConfig,
) -> Result<Vec<Result<Vec<f64>, E>>, BootstrapError>
where
    F: Fn(&EvaluationSample) -> Result<Vec<f64>, E> + Sync,
    E: Send,
{
    cfg.validate()?;
    let n = sample.len();
    if n < 2 {
        return Err(BootstrapError::TooFewClusters(n));
    }
    let run = || {
        (0..cfg.replications)
            .into_par_iter()
            .map(|b| {
                let idx = resample_indices(n, cfg.seed, b as u64);
                f(&resample(sample, &idx))
            })
            .collect::<Vec<_>>()
    };
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| BootstrapError::ThreadPool(e.to_string()))
            .map(|pool| pool.install(run)),
        None => Ok(run()),
    }
}

/// Summarizes replicates of one statistic around its point estimate.
/// `n_failed` counts replicates already discarded upstream.
pub fn summarize(
    estimate: f64,
    replicates: &[f64],
    n_failed: usize,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult, BootstrapError> {
    let usable: Vec<f64> = replicates
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    let failed = n_failed + (replicates.len() - usable.len());
    let total = failed + usable.len();
    if failed as f64 > MAX_FAILED_SHARE * total as f64 {
        return Err(BootstrapError::TooManyFailures { failed, total });
    }
    if usable.len() < 2 {
        return Err(BootstrapError::TooFewReplicates(usable.len()));
    }
    let k = usable.len() as f64;
    // shifted by the first replicate so identical replicates give exactly 0
    let shift = usable[0];
    let mean = usable.iter().map(|v| v - shift).sum::<f64>() / k;
    let var = usable
        .iter()
        .map(|v| (v - shift - mean).powi(2))
        .sum::<f64>()
        / (k - 1.0);
    let se = var.sqrt();

    let (p_value, degenerate) = if se > 0.0 {
        (2.0 * normal::cdf(-(estimate / se).abs()), false)
    } else if estimate != 0.0 {
        (0.0, true)
    } else {
        (1.0, true)
    };
    let z = normal::quantile(0.5 * (1.0 + cfg.ci_level));
    let mut sorted = usable.clone();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - cfg.ci_level;
    Ok(BootstrapResult {
        estimate,
        se,
        p_value,
        ci: (estimate - z * se, estimate + z * se),
        percentile_ci: (
            quantile_sorted(&sorted, 0.5 * alpha),
            quantile_sorted(&sorted, 1.0 - 0.5 * alpha),
        ),
        n_replicates: usable.len(),
        n_failed_replicates: failed,
        degenerate,
        replicates: cfg.keep_replicates.then_some(usable),
    })
}

/// Linear interpolation between order statistics.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bootstraps a vector of statistics whose point values are already known.
///
/// A replicate where `f` errors counts as failed for every statistic, and
/// more than 10% such replicates is a hard error. A non-finite value fails
/// only that statistic in that replicate, so the per-statistic results can
/// fail independently.
pub fn bootstrap_around<F, E>(
    sample: &EvaluationSample,
    point: &[f64],
    f: F,
    cfg: &BootstrapConfig,
) -> Result<Vec<Result<BootstrapResult, BootstrapError>>, BootstrapError>
where
    F: Fn(&EvaluationSample) -> Result<Vec<f64>, E> + Sync,
    E: Send + std::fmt::Display,
{
    let reps = replicate_statistics(sample, f, cfg)?;
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(reps.len()); point.len()];
    let mut whole_failures = 0;
    for (b, rep) in reps.into_iter().enumerate() {
        match rep {
            Ok(values) => {
                if values.len() != point.len() {
                    return Err(BootstrapError::Arity {
                        replicate: b,
                        got: values.len(),
                        expected: point.len(),
                    });
                }
                for (col, v) in columns.iter_mut().zip(values) {
                    col.push(v);
                }
            }
            Err(e) => {
                log::debug!("bootstrap replicate {b} failed: {e}");
                whole_failures += 1;
            }
        }
    }
    if whole_failures as f64 > MAX_FAILED_SHARE * cfg.replications as f64 {
        return Err(BootstrapError::TooManyFailures {
            failed: whole_failures,
            total: cfg.replications,
        });
    }
    Ok(point
        .iter()
        .zip(&columns)
        .map(|(&est, col)| summarize(est, col, whole_failures, cfg))
        .collect())
}

/// Computes the point estimates with `f` on the full sample, then bootstraps.
pub fn cluster_bootstrap<F, E>(
    sample: &EvaluationSample,
    f: F,
    cfg: &BootstrapConfig,
) -> Result<Vec<Result<BootstrapResult, BootstrapError>>, BootstrapError>
where
    F: Fn(&EvaluationSample) -> Result<Vec<f64>, E> + Sync,
    E: Send + std::fmt::Display,
{
    cfg.validate()?;
    let point = f(sample).map_err(|e| BootstrapError::Point(e.to_string()))?;
    bootstrap_around(sample, &point, f, cfg)
}
