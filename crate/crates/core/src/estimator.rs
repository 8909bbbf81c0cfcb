//! Inverse-probability-weighted LATE, ITT and first-stage estimation.
//!
//! With instrument propensity `p = Pr(Z = 1 | X)` the LATE is the ratio of
//! two weighted contrasts,
//!
//! ```text
//! LATE = E[Y Z / p - Y (1 - Z) / (1 - p)] / E[D Z / p - D (1 - Z) / (1 - p)]
//! ```
//!
//! whose numerator is the ITT and whose denominator is the first stage.
//! [`Weighting::Unnormalized`] evaluates the sample analog verbatim;
//! [`Weighting::Normalized`] rescales the `Z = 1` and `Z = 0` weights to sum
//! to one within each group before differencing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linkage::{EvaluationSample, OutcomeRow, Participant};
use crate::propensity::{
    build_design, fit_probit, predict_pscore, CovariateSpec, ProbitFit, ProbitOptions,
    PropensityError,
};

/// First stages (and complier masses) smaller than this count as zero.
const ZERO_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("no rows to estimate on")]
    EmptyRows,
    #[error("no rows with Z = {0}")]
    EmptyInstrumentCell(u8),
    #[error("no identified compliers (first stage {0:.3e})")]
    NoCompliers(f64),
    #[error("complier non-treatment mass is zero ({0:.3e})")]
    ZeroComplierMass(f64),
    #[error("propensity score {value} at row {row} outside (0, 1)")]
    InvalidPscore { row: usize, value: f64 },
    #[error("{pscores} propensity scores for {units} participants")]
    Misaligned { pscores: usize, units: usize },
    #[error("empty sample after trimming")]
    EmptyAfterTrimming,
    #[error("invalid trimming rule [{lo}, {hi}]")]
    InvalidTrim { lo: f64, hi: f64 },
    #[error("subgroup `{0}` is empty")]
    EmptySubgroup(Subgroup),
    #[error("propensity model: {0}")]
    Propensity(#[from] PropensityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    ResidingBinary,
    EmployedBinary,
    ActivityLevelPct,
    YearsResiding,
    YearsEmployed,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 5] = [
        OutcomeKind::ResidingBinary,
        OutcomeKind::EmployedBinary,
        OutcomeKind::ActivityLevelPct,
        OutcomeKind::YearsResiding,
        OutcomeKind::YearsEmployed,
    ];

    pub fn key(self) -> &'static str {
        match self {
            OutcomeKind::ResidingBinary => "residing_binary",
            OutcomeKind::EmployedBinary => "employed_binary",
            OutcomeKind::ActivityLevelPct => "activity_level_pct",
            OutcomeKind::YearsResiding => "years_residing",
            OutcomeKind::YearsEmployed => "years_employed",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OutcomeKind::ResidingBinary => "Residing (binary)",
            OutcomeKind::EmployedBinary => "Employed (binary)",
            OutcomeKind::ActivityLevelPct => "Activity level (%)",
            OutcomeKind::YearsResiding => "Years residing",
            OutcomeKind::YearsEmployed => "Years employed",
        }
    }

    pub fn value(self, row: &OutcomeRow) -> f64 {
        match self {
            OutcomeKind::ResidingBinary => f64::from(u8::from(row.residing)),
            OutcomeKind::EmployedBinary => f64::from(u8::from(row.employed)),
            OutcomeKind::ActivityLevelPct => row.activity_level,
            OutcomeKind::YearsResiding => f64::from(row.years_residing),
            OutcomeKind::YearsEmployed => f64::from(row.years_employed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Normalized,
    Unnormalized,
}

/// Participants with propensity outside `[lo, hi]` are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimRule {
    pub lo: f64,
    pub hi: f64,
}

impl Default for TrimRule {
    fn default() -> Self {
        Self { lo: 0.05, hi: 0.95 }
    }
}

impl TrimRule {
    pub fn new(lo: f64, hi: f64) -> Result<Self, EstimatorError> {
        if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
            return Err(EstimatorError::InvalidTrim { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn keeps(&self, p: f64) -> bool {
        self.lo <= p && p <= self.hi
    }
}

impl FromStr for TrimRule {
    type Err = String;

    /// Parses `LO,HI`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s
            .split_once(',')
            .ok_or_else(|| format!("expected LO,HI, got `{s}`"))?;
        let lo: f64 = lo
            .trim()
            .parse()
            .map_err(|_| format!("bad lower bound `{lo}`"))?;
        let hi: f64 = hi
            .trim()
            .parse()
            .map_err(|_| format!("bad upper bound `{hi}`"))?;
        TrimRule::new(lo, hi).map_err(|e| e.to_string())
    }
}

/// One outcome observation ready for weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpwRow {
    pub y: f64,
    pub d: bool,
    pub z: bool,
    pub pscore: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpwEffect {
    pub late: f64,
    pub itt: f64,
    pub first_stage: f64,
}

fn check_rows(rows: &[IpwRow]) -> Result<(), EstimatorError> {
    if rows.is_empty() {
        return Err(EstimatorError::EmptyRows);
    }
    if let Some((row, r)) = rows
        .iter()
        .enumerate()
        .find(|(_, r)| !(r.pscore > 0.0 && r.pscore < 1.0))
    {
        return Err(EstimatorError::InvalidPscore {
            row,
            value: r.pscore,
        });
    }
    if !rows.iter().any(|r| r.z) {
        return Err(EstimatorError::EmptyInstrumentCell(1));
    }
    if !rows.iter().any(|r| !r.z) {
        return Err(EstimatorError::EmptyInstrumentCell(0));
    }
    Ok(())
}

/// Weighted `Z = 1` minus `Z = 0` contrast of `f`.
fn contrast<F: Fn(&IpwRow) -> f64>(rows: &[IpwRow], weighting: Weighting, f: F) -> f64 {
    let (mut s1, mut w1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
    for r in rows {
        if r.z {
            let w = 1.0 / r.pscore;
            s1 += w * f(r);
            w1 += w;
        } else {
            let w = 1.0 / (1.0 - r.pscore);
            s0 += w * f(r);
            w0 += w;
        }
    }
    match weighting {
        Weighting::Unnormalized => (s1 - s0) / rows.len() as f64,
        Weighting::Normalized => s1 / w1 - s0 / w0,
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// IPW estimate of LATE, ITT and first stage for one outcome.
pub fn ipw_late(rows: &[IpwRow], weighting: Weighting) -> Result<IpwEffect, EstimatorError> {
    check_rows(rows)?;
    let first_stage = contrast(rows, weighting, |r| indicator(r.d));
    if first_stage.abs() < ZERO_DENOMINATOR {
        return Err(EstimatorError::NoCompliers(first_stage));
    }
    let itt = contrast(rows, weighting, |r| r.y);
    Ok(IpwEffect {
        late: itt / first_stage,
        itt,
        first_stage,
    })
}

/// Mean potential outcome under non-treatment among compliers,
/// `E[Y (1-D) W] / E[(1-D) W]` with `W = Z/p - (1-Z)/(1-p)`.
pub fn complier_y0_mean(rows: &[IpwRow], weighting: Weighting) -> Result<f64, EstimatorError> {
    check_rows(rows)?;
    let mass = contrast(rows, weighting, |r| 1.0 - indicator(r.d));
    if mass.abs() < ZERO_DENOMINATOR {
        return Err(EstimatorError::ZeroComplierMass(mass));
    }
    let num = contrast(rows, weighting, |r| r.y * (1.0 - indicator(r.d)));
    Ok(num / mass)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateEstimate {
    pub outcome: OutcomeKind,
    pub late: f64,
    pub itt: f64,
    pub first_stage: f64,
    pub complier_y0_mean: f64,
    /// Outcome rows entering the estimate.
    pub n_used: usize,
    /// Outcome rows removed by trimming.
    pub n_trimmed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trimmed {
    /// One flag per participant.
    pub kept: Vec<bool>,
    pub n_trimmed_participants: usize,
    pub n_trimmed_rows: usize,
    pub n_kept_rows: usize,
}

/// Participant-level trimming: a dropped participant loses all outcome rows.
pub fn trim(
    sample: &EvaluationSample,
    pscores: &[f64],
    rule: TrimRule,
) -> Result<Trimmed, EstimatorError> {
    if pscores.len() != sample.len() {
        return Err(EstimatorError::Misaligned {
            pscores: pscores.len(),
            units: sample.len(),
        });
    }
    let kept: Vec<bool> = pscores.iter().map(|p| rule.keeps(*p)).collect();
    let mut out = Trimmed {
        n_trimmed_participants: kept.iter().filter(|k| !**k).count(),
        kept,
        n_trimmed_rows: 0,
        n_kept_rows: 0,
    };
    for (p, keep) in sample.participants.iter().zip(&out.kept) {
        if *keep {
            out.n_kept_rows += p.outcomes.len();
        } else {
            out.n_trimmed_rows += p.outcomes.len();
        }
    }
    if out.n_kept_rows == 0 {
        return Err(EstimatorError::EmptyAfterTrimming);
    }
    Ok(out)
}

fn collect_rows<'a, F>(
    participants: impl Iterator<Item = (&'a Participant, f64)>,
    outcome: OutcomeKind,
    row_filter: F,
) -> Vec<IpwRow>
where
    F: Fn(&OutcomeRow) -> bool,
{
    let mut rows = Vec::new();
    for (p, pscore) in participants {
        for r in p.outcomes.iter().filter(|r| row_filter(r)) {
            rows.push(IpwRow {
                y: outcome.value(r),
                d: p.d,
                z: p.z,
                pscore,
            });
        }
    }
    rows
}

fn estimate_rows(
    rows: &[IpwRow],
    outcome: OutcomeKind,
    n_trimmed: usize,
    weighting: Weighting,
) -> Result<LateEstimate, EstimatorError> {
    let effect = ipw_late(rows, weighting)?;
    let y0 = complier_y0_mean(rows, weighting)?;
    Ok(LateEstimate {
        outcome,
        late: effect.late,
        itt: effect.itt,
        first_stage: effect.first_stage,
        complier_y0_mean: y0,
        n_used: rows.len(),
        n_trimmed,
    })
}

fn kept_units<'a>(
    sample: &'a EvaluationSample,
    pscores: &'a [f64],
    trimmed: &'a Trimmed,
) -> impl Iterator<Item = (&'a Participant, f64)> + 'a {
    sample
        .participants
        .iter()
        .zip(pscores)
        .zip(&trimmed.kept)
        .filter(|(_, keep)| **keep)
        .map(|((p, ps), _)| (p, *ps))
}

/// Estimates on all outcome periods pooled; one propensity per participant
/// is broadcast to that participant's rows.
pub fn estimate_pooled(
    sample: &EvaluationSample,
    pscores: &[f64],
    outcomes: &[OutcomeKind],
    rule: TrimRule,
    weighting: Weighting,
) -> Result<Vec<LateEstimate>, EstimatorError> {
    let trimmed = trim(sample, pscores, rule)?;
    outcomes
        .iter()
        .map(|&outcome| {
            let rows = collect_rows(kept_units(sample, pscores, &trimmed), outcome, |_| true);
            estimate_rows(&rows, outcome, trimmed.n_trimmed_rows, weighting)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodEstimates {
    pub periods: BTreeMap<u32, Vec<LateEstimate>>,
    pub notices: Vec<String>,
}

/// Estimates per outcome period. Periods where estimation is impossible
/// (an empty instrument cell, no compliers) are skipped with a notice.
pub fn estimate_by_period(
    sample: &EvaluationSample,
    pscores: &[f64],
    outcomes: &[OutcomeKind],
    rule: TrimRule,
    weighting: Weighting,
) -> Result<PeriodEstimates, EstimatorError> {
    let trimmed = trim(sample, pscores, rule)?;
    let periods: BTreeSet<u32> = sample
        .participants
        .iter()
        .flat_map(|p| p.outcomes.iter().map(|r| r.period))
        .collect();

    let mut out = PeriodEstimates::default();
    'periods: for period in periods {
        let n_trimmed = sample
            .participants
            .iter()
            .zip(&trimmed.kept)
            .filter(|(_, keep)| !**keep)
            .map(|(p, _)| p.outcomes.iter().filter(|r| r.period == period).count())
            .sum();
        let mut estimates = Vec::with_capacity(outcomes.len());
        for &outcome in outcomes {
            let rows = collect_rows(kept_units(sample, pscores, &trimmed), outcome, |r| {
                r.period == period
            });
            match estimate_rows(&rows, outcome, n_trimmed, weighting) {
                Ok(e) => estimates.push(e),
                Err(e) => {
                    out.notices.push(format!("period {period} skipped: {e}"));
                    continue 'periods;
                }
            }
        }
        out.periods.insert(period, estimates);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subgroup {
    #[default]
    All,
    Commuter,
    NonCommuter,
}

impl Subgroup {
    pub fn contains(self, p: &Participant) -> bool {
        match self {
            Subgroup::All => true,
            Subgroup::Commuter => p.commuter_at_baseline,
            Subgroup::NonCommuter => !p.commuter_at_baseline,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subgroup::All => "all",
            Subgroup::Commuter => "commuter",
            Subgroup::NonCommuter => "non-commuter",
        }
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subgroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Subgroup::All),
            "commuter" => Ok(Subgroup::Commuter),
            "non-commuter" | "non_commuter" => Ok(Subgroup::NonCommuter),
            other => Err(format!("unknown subgroup `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub covariates: CovariateSpec,
    pub probit: ProbitOptions,
    pub trim: TrimRule,
    pub weighting: Weighting,
    pub outcomes: Vec<OutcomeKind>,
    pub by_period: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            covariates: CovariateSpec::year_dummies(),
            probit: ProbitOptions::default(),
            trim: TrimRule::default(),
            weighting: Weighting::default(),
            outcomes: OutcomeKind::ALL.to_vec(),
            by_period: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub fit: ProbitFit,
    pub dropped_columns: Vec<String>,
    pub pscores: Vec<f64>,
    pub pooled: Vec<LateEstimate>,
    pub periods: Option<PeriodEstimates>,
    pub n_participants: usize,
    pub n_participants_trimmed: usize,
    pub n_rows: usize,
    pub n_rows_trimmed: usize,
}

/// Propensity fit, trimming and estimation on one sample.
pub fn run_pipeline(
    sample: &EvaluationSample,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, EstimatorError> {
    let design = build_design(sample, &cfg.covariates)?;
    let z: Vec<bool> = sample.participants.iter().map(|p| p.z).collect();
    let fit = fit_probit(&design, &z, cfg.probit)?;
    let pscores = predict_pscore(&fit, &design)?;
    let trimmed = trim(sample, &pscores, cfg.trim)?;
    let pooled = estimate_pooled(sample, &pscores, &cfg.outcomes, cfg.trim, cfg.weighting)?;
    let periods = if cfg.by_period {
        Some(estimate_by_period(
            sample,
            &pscores,
            &cfg.outcomes,
            cfg.trim,
            cfg.weighting,
        )?)
    } else {
        None
    };
    Ok(PipelineOutput {
        fit,
        dropped_columns: design.dropped_columns().to_vec(),
        pscores,
        pooled,
        periods,
        n_participants: sample.len(),
        n_participants_trimmed: trimmed.n_trimmed_participants,
        n_rows: sample.n_rows(),
        n_rows_trimmed: trimmed.n_trimmed_rows,
    })
}

/// Runs the whole pipeline, propensity refit included, on one subgroup.
pub fn estimate_subgroup(
    sample: &EvaluationSample,
    subgroup: Subgroup,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, EstimatorError> {
    let sub = sample.filter(|p| subgroup.contains(p));
    if sub.is_empty() {
        return Err(EstimatorError::EmptySubgroup(subgroup));
    }
    run_pipeline(&sub, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(y: f64, d: bool, z: bool, p: f64) -> IpwRow {
        IpwRow { y, d, z, pscore: p }
    }

    #[test]
    fn constant_pscore_collapses_to_mean_differences() {
        // one-sided noncompliance: no D = 1 among Z = 0
        let rows = vec![
            row(1.0, true, true, 0.4),
            row(0.0, false, true, 0.4),
            row(1.0, true, true, 0.4),
            row(1.0, false, true, 0.4),
            row(0.0, false, false, 0.4),
            row(1.0, false, false, 0.4),
            row(0.0, false, false, 0.4),
            row(0.0, false, false, 0.4),
            row(0.0, false, false, 0.4),
            row(0.0, false, false, 0.4),
        ];
        let e = ipw_late(&rows, Weighting::Normalized).unwrap();
        let mean_y1 = 3.0 / 4.0;
        let mean_y0 = 1.0 / 6.0;
        let mean_d1 = 2.0 / 4.0;
        assert!((e.itt - (mean_y1 - mean_y0)).abs() < 1e-15);
        assert!((e.first_stage - mean_d1).abs() < 1e-15);
        assert!((e.late - (mean_y1 - mean_y0) / mean_d1).abs() < 1e-14);
    }

    #[test]
    fn unnormalized_uses_the_raw_sample_analog() {
        let rows = vec![
            row(2.0, true, true, 0.25),
            row(1.0, false, true, 0.5),
            row(3.0, false, false, 0.25),
            row(0.0, false, false, 0.5),
        ];
        // mean of [Y Z/p - Y(1-Z)/(1-p)] = (8 + 2 - 4 - 0) / 4
        // mean of [D Z/p - D(1-Z)/(1-p)] = (4) / 4
        let e = ipw_late(&rows, Weighting::Unnormalized).unwrap();
        assert_eq!(e.itt, 1.5);
        assert_eq!(e.first_stage, 1.0);
        assert_eq!(e.late, 1.5);
    }

    #[test]
    fn zero_first_stage_is_an_error() {
        let rows = vec![row(1.0, false, true, 0.5), row(0.0, false, false, 0.5)];
        assert!(matches!(
            ipw_late(&rows, Weighting::Normalized),
            Err(EstimatorError::NoCompliers(_))
        ));
        let rows = vec![row(1.0, true, true, 0.5)];
        assert_eq!(
            ipw_late(&rows, Weighting::Normalized),
            Err(EstimatorError::EmptyInstrumentCell(0))
        );
    }

    #[test]
    fn complier_y0_is_zero_when_outcome_equals_treatment() {
        let rows: Vec<IpwRow> = (0..12)
            .map(|i| {
                let z = i % 3 == 0;
                let d = z && i % 2 == 0;
                row(indicator(d), d, z, 0.3)
            })
            .collect();
        for w in [Weighting::Normalized, Weighting::Unnormalized] {
            assert_eq!(complier_y0_mean(&rows, w).unwrap(), 0.0);
        }
    }

    #[test]
    fn trim_rule_parsing_and_validation() {
        assert_eq!(
            "0.1,0.9".parse::<TrimRule>().unwrap(),
            TrimRule { lo: 0.1, hi: 0.9 }
        );
        assert!("0.9,0.1".parse::<TrimRule>().is_err());
        assert!("0.1".parse::<TrimRule>().is_err());
        assert!(TrimRule::new(0.0, 1.0).is_ok());
        assert!(TrimRule::new(-0.1, 1.0).is_err());
        let rule = TrimRule::default();
        assert!(rule.keeps(0.05) && rule.keeps(0.95) && !rule.keeps(0.96));
    }
}
