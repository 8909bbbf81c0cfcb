//! Run orchestration and report files.
//!
//! [`run_analysis`] executes one configured analysis (load or simulate,
//! link, select, estimate, bootstrap) and returns a [`Report`];
//! [`write_report`] renders it as `report.json`, `tables.txt`,
//! `periods.csv` and `balance.csv`. Point estimates come from a single
//! pipeline call and are handed to the bootstrap unchanged.

mod balance;
mod render;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use balance::{balance_table, welch_t, BalanceRow, BalanceTable, WelchTest};
pub use render::{render_balance_csv, render_periods_csv, render_tables};

use crate::bootstrap::{bootstrap_around, BootstrapConfig, BootstrapError, BootstrapResult};
use crate::dgp::{self, DgpConfig, GroundTruth};
use crate::estimator::{
    estimate_subgroup, EstimatorError, OutcomeKind, PipelineConfig, PipelineOutput, Subgroup,
    TrimRule, Weighting,
};
use crate::linkage::{
    link_records, load_employment_csv, load_lottery_csv, select_participation, EvaluationSample,
    ExclusionLedger, SampleWindow,
};
use crate::propensity::{CovariateMode, CovariateSpec};

/// Pipeline stage that produced an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Input,
    Linkage,
    Sample,
    Subgroup,
    Propensity,
    Estimation,
    Bootstrap,
    Output,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Input => "input",
            Stage::Linkage => "linkage",
            Stage::Sample => "sample",
            Stage::Subgroup => "subgroup",
            Stage::Propensity => "propensity",
            Stage::Estimation => "estimation",
            Stage::Bootstrap => "bootstrap",
            Stage::Output => "output",
        }
    }

    /// 1 for input-side problems, 2 for estimation failures.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config | Stage::Input | Stage::Linkage | Stage::Sample | Stage::Output => 1,
            Stage::Subgroup | Stage::Propensity | Stage::Estimation | Stage::Bootstrap => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportError {
    pub stage: Stage,
    pub message: String,
}

impl ReportError {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

impl fmt::Display for ReportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage.as_str(), self.message)
    }
}

impl std::error::Error for ReportError {}

impl From<EstimatorError> for ReportError {
    fn from(e: EstimatorError) -> Self {
        let stage = match e {
            EstimatorError::Propensity(_) => Stage::Propensity,
            EstimatorError::EmptySubgroup(_) => Stage::Subgroup,
            _ => Stage::Estimation,
        };
        ReportError::new(stage, e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    Files {
        lottery: PathBuf,
        employment: PathBuf,
    },
    Dgp {
        config: Box<DgpConfig>,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: InputSource,
    pub window: SampleWindow,
    pub participation: usize,
    pub subgroup: Subgroup,
    pub covariates: CovariateMode,
    pub trim: TrimRule,
    pub weighting: Weighting,
    /// `replications == 0` skips inference.
    pub bootstrap: BootstrapConfig,
    pub out_dir: PathBuf,
    /// Also write the simulated CSVs next to the report (DGP input only).
    pub write_synthetic: bool,
}

impl RunConfig {
    pub fn new(input: InputSource, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            input,
            window: SampleWindow::default(),
            participation: 1,
            subgroup: Subgroup::All,
            covariates: CovariateMode::YearDummiesOnly,
            trim: TrimRule::default(),
            weighting: Weighting::Normalized,
            bootstrap: BootstrapConfig::default(),
            out_dir: out_dir.into(),
            write_synthetic: false,
        }
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.participation == 0 {
            return Err(ReportError::new(
                Stage::Config,
                "participation must be at least 1",
            ));
        }
        self.window
            .validate()
            .map_err(|e| ReportError::new(Stage::Config, e))?;
        TrimRule::new(self.trim.lo, self.trim.hi)
            .map_err(|e| ReportError::new(Stage::Config, e))?;
        if self.bootstrap.replications > 0 {
            self.bootstrap
                .validate()
                .map_err(|e| ReportError::new(Stage::Config, e))?;
        }
        if let InputSource::Dgp { config, .. } = &self.input {
            config
                .validate()
                .map_err(|e| ReportError::new(Stage::Config, e))?;
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            covariates: CovariateSpec {
                mode: self.covariates,
                years: None,
            },
            trim: self.trim,
            weighting: self.weighting,
            outcomes: OutcomeKind::ALL.to_vec(),
            by_period: true,
            ..PipelineConfig::default()
        }
    }
}

/// A point estimate with its bootstrap inference, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub estimate: f64,
    pub se: Option<f64>,
    pub p_value: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub percentile_ci: Option<(f64, f64)>,
    pub n_failed_replicates: Option<usize>,
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Inference {
    fn point(estimate: f64) -> Self {
        Self {
            estimate,
            se: None,
            p_value: None,
            ci: None,
            percentile_ci: None,
            n_failed_replicates: None,
            degenerate: false,
            error: None,
        }
    }

    fn from_bootstrap(estimate: f64, r: Result<BootstrapResult, BootstrapError>) -> Self {
        match r {
            Ok(b) => Self {
                estimate,
                se: Some(b.se),
                p_value: Some(b.p_value),
                ci: Some(b.ci),
                percentile_ci: Some(b.percentile_ci),
                n_failed_replicates: Some(b.n_failed_replicates),
                degenerate: b.degenerate,
                error: None,
            },
            Err(e) => Self {
                error: Some(e.to_string()),
                ..Self::point(estimate)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEntry {
    pub outcome: OutcomeKind,
    pub late: Inference,
    pub first_stage: Inference,
    pub itt: Inference,
    pub complier_y0_mean: f64,
    pub n_used: usize,
    pub n_trimmed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodEntry {
    pub outcome: OutcomeKind,
    pub period: u32,
    pub late: Inference,
    pub complier_y0_mean: f64,
    pub n_used: usize,
    pub n_trimmed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub input: String,
    pub participation: usize,
    pub subgroup: Subgroup,
    pub covariates: CovariateMode,
    pub weighting: Weighting,
    pub trim: TrimRule,
    pub replications: usize,
    pub seed: u64,
    pub ci_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub n_participants: usize,
    pub n_winners: usize,
    pub n_rows: usize,
    pub ledger: ExclusionLedger,
    pub notices: Vec<String>,
    pub linkage_warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySummary {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    pub dropped_columns: Vec<String>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub pscore_min: f64,
    pub pscore_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimSummary {
    pub rule: TrimRule,
    pub participants_trimmed: usize,
    pub rows_trimmed: usize,
    pub rows_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run: RunSummary,
    pub sample: SampleSummary,
    pub propensity: PropensitySummary,
    pub trimming: TrimSummary,
    pub pooled: Vec<PooledEntry>,
    pub periods: Vec<PeriodEntry>,
    pub period_notices: Vec<String>,
    pub balance: BalanceTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<GroundTruth>,
}

/// Which number of a pipeline output a bootstrapped statistic is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StatKey {
    Late(OutcomeKind),
    FirstStage(OutcomeKind),
    Itt(OutcomeKind),
    PeriodLate(u32, OutcomeKind),
}

fn extract(out: &PipelineOutput, keys: &[StatKey]) -> Vec<f64> {
    let pooled = |o: OutcomeKind| out.pooled.iter().find(|e| e.outcome == o);
    keys.iter()
        .map(|key| {
            let v = match *key {
                StatKey::Late(o) => pooled(o).map(|e| e.late),
                StatKey::FirstStage(o) => pooled(o).map(|e| e.first_stage),
                StatKey::Itt(o) => pooled(o).map(|e| e.itt),
                StatKey::PeriodLate(t, o) => out
                    .periods
                    .as_ref()
                    .and_then(|p| p.periods.get(&t))
                    .and_then(|v| v.iter().find(|e| e.outcome == o))
                    .map(|e| e.late),
            };
            v.unwrap_or(f64::NAN)
        })
        .collect()
}

struct Loaded {
    sample: EvaluationSample,
    warnings: Vec<String>,
    truth: Option<GroundTruth>,
    label: String,
}

fn load(cfg: &RunConfig) -> Result<Loaded, ReportError> {
    let (lottery, employment, truth, label) = match &cfg.input {
        InputSource::Files {
            lottery,
            employment,
        } => {
            let l = load_lottery_csv(lottery).map_err(|e| ReportError::new(Stage::Input, e))?;
            let e =
                load_employment_csv(employment).map_err(|e| ReportError::new(Stage::Input, e))?;
            let label = format!("files: {}, {}", lottery.display(), employment.display());
            (l, e, None, label)
        }
        InputSource::Dgp { config, seed } => {
            let data =
                dgp::generate(config, *seed).map_err(|e| ReportError::new(Stage::Input, e))?;
            if cfg.write_synthetic {
                data.write_csvs(&cfg.out_dir)
                    .map_err(|e| ReportError::new(Stage::Output, e))?;
            }
            let truth = data.truth.clone();
            (
                data.lottery,
                data.employment,
                Some(truth),
                format!("dgp: seed {seed}"),
            )
        }
    };
    let panel = link_records(&lottery, &employment);
    let sample = select_participation(&panel, cfg.participation, cfg.window)
        .map_err(|e| ReportError::new(Stage::Linkage, e))?;
    if sample.is_empty() {
        let why = sample
            .notices
            .first()
            .cloned()
            .unwrap_or_else(|| "no participant passes the sample restrictions".into());
        return Err(ReportError::new(Stage::Sample, why));
    }
    Ok(Loaded {
        sample,
        warnings: panel.warnings,
        truth,
        label,
    })
}

/// Runs one analysis end to end without touching the output directory
/// (except for optional synthetic CSVs).
pub fn run_analysis(cfg: &RunConfig) -> Result<Report, ReportError> {
    cfg.validate()?;
    let loaded = load(cfg)?;
    let pipeline = cfg.pipeline();
    let full = &loaded.sample;
    let sample = full.filter(|p| cfg.subgroup.contains(p));

    let out = estimate_subgroup(full, cfg.subgroup, &pipeline)?;

    let mut keys = Vec::new();
    for e in &out.pooled {
        keys.extend([
            StatKey::Late(e.outcome),
            StatKey::FirstStage(e.outcome),
            StatKey::Itt(e.outcome),
        ]);
    }
    let periods = out.periods.clone().unwrap_or_default();
    for (&t, estimates) in &periods.periods {
        keys.extend(estimates.iter().map(|e| StatKey::PeriodLate(t, e.outcome)));
    }
    let point = extract(&out, &keys);

    let inference: Vec<Inference> = if cfg.bootstrap.replications == 0 {
        point.iter().map(|&v| Inference::point(v)).collect()
    } else {
        let results = bootstrap_around(
            &sample,
            &point,
            |s| crate::estimator::run_pipeline(s, &pipeline).map(|o| extract(&o, &keys)),
            &cfg.bootstrap,
        )
        .map_err(|e| ReportError::new(Stage::Bootstrap, e))?;
        point
            .iter()
            .zip(results)
            .map(|(&v, r)| Inference::from_bootstrap(v, r))
            .collect()
    };
    let mut inference = inference.into_iter();

    let pooled = out
        .pooled
        .iter()
        .map(|e| PooledEntry {
            outcome: e.outcome,
            late: inference.next().expect("late"),
            first_stage: inference.next().expect("first stage"),
            itt: inference.next().expect("itt"),
            complier_y0_mean: e.complier_y0_mean,
            n_used: e.n_used,
            n_trimmed: e.n_trimmed,
        })
        .collect();
    let mut period_entries = Vec::new();
    for (&t, estimates) in &periods.periods {
        for e in estimates {
            period_entries.push(PeriodEntry {
                outcome: e.outcome,
                period: t,
                late: inference.next().expect("period late"),
                complier_y0_mean: e.complier_y0_mean,
                n_used: e.n_used,
                n_trimmed: e.n_trimmed,
            });
        }
    }
    period_entries.sort_by_key(|e| (e.outcome, e.period));

    let (pscore_min, pscore_max) = out
        .pscores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(*p), hi.max(*p))
        });
    let seed = match &cfg.input {
        InputSource::Dgp { seed, .. } => *seed,
        InputSource::Files { .. } => cfg.bootstrap.seed,
    };
    Ok(Report {
        run: RunSummary {
            input: loaded.label,
            participation: cfg.participation,
            subgroup: cfg.subgroup,
            covariates: cfg.covariates,
            weighting: cfg.weighting,
            trim: cfg.trim,
            replications: cfg.bootstrap.replications,
            seed,
            ci_level: cfg.bootstrap.ci_level,
        },
        sample: SampleSummary {
            n_participants: sample.len(),
            n_winners: sample.n_winners(),
            n_rows: sample.n_rows(),
            ledger: full.ledger,
            notices: full.notices.clone(),
            linkage_warnings: loaded.warnings,
        },
        propensity: PropensitySummary {
            labels: out.fit.labels.clone(),
            coefficients: out.fit.coefficients.clone(),
            dropped_columns: out.dropped_columns.clone(),
            log_likelihood: out.fit.log_likelihood,
            iterations: out.fit.iterations,
            pscore_min,
            pscore_max,
        },
        trimming: TrimSummary {
            rule: cfg.trim,
            participants_trimmed: out.n_participants_trimmed,
            rows_trimmed: out.n_rows_trimmed,
            rows_used: out.n_rows - out.n_rows_trimmed,
        },
        pooled,
        periods: period_entries,
        period_notices: periods.notices,
        balance: balance_table(&sample),
        truth: loaded.truth,
    })
}

pub const REPORT_FILES: [&str; 4] = ["report.json", "tables.txt", "periods.csv", "balance.csv"];

/// Writes the four report files into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<(), ReportError> {
    let io = |e: std::io::Error| ReportError::new(Stage::Output, format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut json =
        serde_json::to_string_pretty(report).map_err(|e| ReportError::new(Stage::Output, e))?;
    json.push('\n');
    let files = [
        (REPORT_FILES[0], json),
        (REPORT_FILES[1], render_tables(report)),
        (REPORT_FILES[2], render_periods_csv(report)),
        (REPORT_FILES[3], render_balance_csv(report)),
    ];
    for (name, content) in files {
        fs::write(dir.join(name), content).map_err(io)?;
    }
    Ok(())
}

/// [`run_analysis`] followed by [`write_report`] into `cfg.out_dir`.
pub fn run(cfg: &RunConfig) -> Result<Report, ReportError> {
    let report = run_analysis(cfg)?;
    write_report(&report, &cfg.out_dir)?;
    Ok(report)
}
