//! Synthetic lottery data with known ground truth.
//!
//! Every applicant gets a latent compliance type (complier, never-taker or,
//! when injected, defier) and a baseline commuter status. Winning the first
//! lottery moves compliers one year later; outcomes from period 2 on follow
//! two-state Markov chains that keep last year's state with probability
//! `persistence` and otherwise redraw from the stationary probability of the
//! unit's (group, type, treatment) cell, so every period has the same
//! marginal. Ground truth is therefore available in closed form.
//!
//! The generator emits exactly the CSV schemas read by [`crate::linkage`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{OutcomeKind, Subgroup};
use crate::linkage::{write_employment, write_lottery};
use crate::linkage::{
    Demographics, EmploymentRecord, Gender, LinkageError, LotteryRecord, Nationality, Season,
};

#[derive(Debug, Error)]
pub enum DgpError {
    #[error("invalid DGP configuration: {0}")]
    Config(String),
    #[error("cannot read DGP config {path}: {message}")]
    Read { path: String, message: String },
    #[error("only {placed} of {requested} reapplications fit the applicant pool")]
    Reapplication { placed: usize, requested: usize },
    #[error("writing synthetic data: {0}")]
    Write(#[from] LinkageError),
    #[error("writing synthetic data to {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// TOML keys must be strings, so year-keyed maps go through `String`.
mod year_map {
    use std::collections::BTreeMap;

    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S, T>(map: &BTreeMap<i32, T>, s: S) -> Result<S::Ok, S::Error>
    where
        S: Serializer,
        T: Serialize,
    {
        map.iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D, T>(d: D) -> Result<BTreeMap<i32, T>, D::Error>
    where
        D: Deserializer<'de>,
        T: Deserialize<'de>,
    {
        BTreeMap::<String, T>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.trim()
                    .parse()
                    .map(|y| (y, v))
                    .map_err(|_| D::Error::custom(format!("bad year key `{k}`")))
            })
            .collect()
    }

    pub mod option {
        use super::*;

        pub fn serialize<S, T>(map: &Option<BTreeMap<i32, T>>, s: S) -> Result<S::Ok, S::Error>
        where
            S: Serializer,
            T: Serialize,
        {
            match map {
                Some(m) => super::serialize(m, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D, T>(d: D) -> Result<Option<BTreeMap<i32, T>>, D::Error>
        where
            D: Deserializer<'de>,
            T: Deserialize<'de>,
        {
            super::deserialize(d).map(Some)
        }
    }
}

/// Stationary outcome probabilities by compliance type and treatment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeProbs {
    pub complier_treated: f64,
    pub complier_untreated: f64,
    pub never_taker: f64,
}

impl TypeProbs {
    pub fn effect(&self) -> f64 {
        self.complier_treated - self.complier_untreated
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub employment: TypeProbs,
    pub residence: TypeProbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemographicMix {
    pub female_share: f64,
    pub austria: f64,
    pub germany: f64,
    pub italy: f64,
    pub switzerland: f64,
    pub other: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_min: f64,
    pub age_max: f64,
    /// Lottery-form reporting noise; employment records are always clean.
    pub missing_nationality: f64,
    pub missing_birth_year: f64,
    pub nationality_mismatch: f64,
}

impl Default for DemographicMix {
    fn default() -> Self {
        Self {
            female_share: 0.30,
            austria: 0.37,
            germany: 0.41,
            italy: 0.07,
            switzerland: 0.01,
            other: 0.14,
            age_mean: 37.5,
            age_sd: 9.6,
            age_min: 18.0,
            age_max: 65.0,
            missing_nationality: 0.04,
            missing_birth_year: 0.04,
            nationality_mismatch: 0.02,
        }
    }
}

impl DemographicMix {
    fn nationality_weights(&self) -> [(Nationality, f64); 5] {
        [
            (Nationality::Austria, self.austria),
            (Nationality::Germany, self.germany),
            (Nationality::Italy, self.italy),
            (Nationality::Switzerland, self.switzerland),
            (Nationality::Other, self.other),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivityModel {
    /// Activity levels in percent of full time.
    pub levels: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for ActivityModel {
    fn default() -> Self {
        Self {
            levels: vec![100.0, 80.0, 60.0, 40.0],
            weights: vec![0.55, 0.20, 0.10, 0.15],
        }
    }
}

impl ActivityModel {
    pub fn mean(&self) -> f64 {
        let total: f64 = self.weights.iter().sum();
        self.levels
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| l * w)
            .sum::<f64>()
            / total
    }
}

/// Yearly first-participant counts 2006..=2016 (winners, losers).
const PAPER_WINNERS: [u32; 11] = [32, 32, 32, 36, 21, 39, 32, 29, 36, 32, 29];
const PAPER_LOSERS: [u32; 11] = [286, 282, 395, 254, 254, 254, 198, 170, 225, 226, 251];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub first_year: i32,
    pub last_year: i32,
    pub last_outcome_year: i32,
    pub employment_first_year: i32,
    pub lottery_last_year: i32,
    /// First participants per in-window year; missing years use
    /// `default_applicants`.
    #[serde(with = "year_map")]
    pub applicants_per_year: BTreeMap<i32, u32>,
    pub default_applicants: u32,
    /// First participants in years outside the evaluation window.
    #[serde(with = "year_map")]
    pub out_of_window_applicants: BTreeMap<i32, u32>,
    /// Exact winner counts among first participants; overrides
    /// `win_prob_per_year` for them.
    #[serde(with = "year_map::option", skip_serializing_if = "Option::is_none")]
    pub winners_per_year: Option<BTreeMap<i32, u32>>,
    #[serde(with = "year_map")]
    pub win_prob_per_year: BTreeMap<i32, f64>,
    pub default_win_prob: f64,
    pub complier_share: f64,
    pub defier_share: f64,
    pub commuter_share: f64,
    pub demographics: DemographicMix,
    pub activity: ActivityModel,
    /// Probability that an outcome state carries over to the next year.
    pub persistence: f64,
    pub commuter: GroupModel,
    pub non_commuter: GroupModel,
    /// Probability that a loser applies again the following year.
    pub reapplication_prob: f64,
    /// Exact number of reapplications; overrides `reapplication_prob`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reapplication_records: Option<usize>,
    /// Relative reapplication propensity of compliers.
    pub reapplication_complier_weight: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        let years = 2006..=2016;
        let applicants = years
            .clone()
            .zip(PAPER_WINNERS.iter().zip(&PAPER_LOSERS))
            .map(|(y, (w, l))| (y, w + l))
            .collect();
        let win_prob = years
            .zip(PAPER_WINNERS.iter().zip(&PAPER_LOSERS))
            .map(|(y, (w, l))| (y, f64::from(*w) / f64::from(w + l)))
            .collect();
        Self {
            first_year: 2006,
            last_year: 2016,
            last_outcome_year: 2018,
            employment_first_year: 2005,
            lottery_last_year: 2019,
            applicants_per_year: applicants,
            default_applicants: 286,
            out_of_window_applicants: BTreeMap::new(),
            winners_per_year: None,
            win_prob_per_year: win_prob,
            default_win_prob: 0.11,
            complier_share: 0.36,
            defier_share: 0.0,
            commuter_share: 0.51,
            demographics: DemographicMix::default(),
            activity: ActivityModel::default(),
            persistence: 0.8,
            commuter: GroupModel {
                employment: TypeProbs {
                    complier_treated: 0.94,
                    complier_untreated: 0.70,
                    never_taker: 0.80,
                },
                residence: TypeProbs {
                    complier_treated: 0.75,
                    complier_untreated: 0.04,
                    never_taker: 0.02,
                },
            },
            non_commuter: GroupModel {
                employment: TypeProbs {
                    complier_treated: 0.50,
                    complier_untreated: 0.26,
                    never_taker: 0.25,
                },
                residence: TypeProbs {
                    complier_treated: 0.75,
                    complier_untreated: 0.04,
                    never_taker: 0.02,
                },
            },
            reapplication_prob: 0.0,
            reapplication_records: None,
            reapplication_complier_weight: 1.0,
        }
    }
}

impl DgpConfig {
    /// Exact yearly winner counts, applicants before and after the window
    /// and a fixed number of reapplications, so the raw-record, first
    /// participation and evaluation-sample counts are all deterministic.
    pub fn paper_shaped() -> Self {
        let winners = (2006..=2016).zip(PAPER_WINNERS).collect();
        let out_of_window = [
            (2003, 300),
            (2004, 330),
            (2005, 346),
            (2017, 320),
            (2018, 330),
            (2019, 320),
        ]
        .into_iter()
        .collect();
        Self {
            winners_per_year: Some(winners),
            out_of_window_applicants: out_of_window,
            reapplication_records: Some(4815),
            ..Self::default()
        }
    }

    /// Employment effects differ by baseline commuter status
    /// (0.11 for commuters, 0.34 for everyone else). Commuters make up 15%
    /// of applicants, so the commuter estimate is the noisier one.
    pub fn heterogeneity() -> Self {
        let mut cfg = Self {
            commuter_share: 0.15,
            ..Self::default()
        };
        cfg.commuter.employment = TypeProbs {
            complier_treated: 0.91,
            complier_untreated: 0.80,
            never_taker: 0.80,
        };
        cfg.non_commuter.employment = TypeProbs {
            complier_treated: 0.54,
            complier_untreated: 0.20,
            never_taker: 0.25,
        };
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self, DgpError> {
        let cfg: Self = toml::from_str(s).map_err(|e| DgpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DgpError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DgpError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("DGP config serializes")
    }

    pub fn applicants(&self, year: i32) -> u32 {
        self.applicants_per_year
            .get(&year)
            .copied()
            .unwrap_or(self.default_applicants)
    }

    pub fn win_prob(&self, year: i32) -> f64 {
        self.win_prob_per_year
            .get(&year)
            .copied()
            .unwrap_or(self.default_win_prob)
    }

    pub fn group(&self, commuter: bool) -> &GroupModel {
        if commuter {
            &self.commuter
        } else {
            &self.non_commuter
        }
    }

    fn window_years(&self) -> std::ops::RangeInclusive<i32> {
        self.first_year..=self.last_year
    }

    pub fn validate(&self) -> Result<(), DgpError> {
        let bad = |m: String| Err(DgpError::Config(m));
        if self.first_year > self.last_year {
            return bad(format!(
                "first_year {} after last_year {}",
                self.first_year, self.last_year
            ));
        }
        if self.last_year + 2 > self.last_outcome_year {
            return bad("last_outcome_year must be at least last_year + 2".into());
        }
        if self.employment_first_year > self.first_year - 1 {
            return bad("employment data must cover the year before first_year".into());
        }
        if self.lottery_last_year < self.last_year {
            return bad("lottery_last_year before last_year".into());
        }
        for y in self.out_of_window_applicants.keys() {
            if self.window_years().contains(y) || *y > self.lottery_last_year {
                return bad(format!(
                    "out-of-window applicant year {y} is not out of window"
                ));
            }
        }
        for y in self.applicants_per_year.keys() {
            if !self.window_years().contains(y) {
                return bad(format!("applicant year {y} outside the window"));
            }
        }
        let mut probs: Vec<(String, f64)> = vec![
            ("complier_share".into(), self.complier_share),
            ("defier_share".into(), self.defier_share),
            ("commuter_share".into(), self.commuter_share),
            ("persistence".into(), self.persistence),
            ("reapplication_prob".into(), self.reapplication_prob),
            ("female_share".into(), self.demographics.female_share),
            (
                "missing_nationality".into(),
                self.demographics.missing_nationality,
            ),
            (
                "missing_birth_year".into(),
                self.demographics.missing_birth_year,
            ),
            (
                "nationality_mismatch".into(),
                self.demographics.nationality_mismatch,
            ),
        ];
        for (name, g) in [
            ("commuter", &self.commuter),
            ("non_commuter", &self.non_commuter),
        ] {
            for (kind, t) in [("employment", g.employment), ("residence", g.residence)] {
                probs.push((
                    format!("{name}.{kind}.complier_treated"),
                    t.complier_treated,
                ));
                probs.push((
                    format!("{name}.{kind}.complier_untreated"),
                    t.complier_untreated,
                ));
                probs.push((format!("{name}.{kind}.never_taker"), t.never_taker));
            }
        }
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.complier_share + self.defier_share > 1.0 {
            return bad("complier_share + defier_share exceeds 1".into());
        }
        let win: Vec<(i32, f64)> = self
            .win_prob_per_year
            .iter()
            .map(|(y, p)| (*y, *p))
            .chain([(0, self.default_win_prob)])
            .collect();
        for (y, p) in win {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("win probability {p} (year {y}) must lie in (0, 1)"));
            }
        }
        if let Some(winners) = &self.winners_per_year {
            for (y, w) in winners {
                if !self.window_years().contains(y) {
                    return bad(format!("winner count for year {y} outside the window"));
                }
                if *w > self.applicants(*y) {
                    return bad(format!("{w} winners exceed the applicants in {y}"));
                }
            }
        }
        let d = &self.demographics;
        let shares = d.nationality_weights();
        if shares.iter().any(|(_, w)| *w < 0.0) || shares.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return bad("nationality shares must be non-negative with a positive sum".into());
        }
        if !(d.age_sd > 0.0 && d.age_min < d.age_max) {
            return bad("age distribution needs sd > 0 and age_min < age_max".into());
        }
        let a = &self.activity;
        if a.levels.is_empty()
            || a.levels.len() != a.weights.len()
            || a.levels.iter().any(|l| !(*l > 0.0 && *l <= 100.0))
            || a.weights.iter().any(|w| *w < 0.0)
            || a.weights.iter().sum::<f64>() <= 0.0
        {
            return bad(
                "activity levels must lie in (0, 100] with matching non-negative weights".into(),
            );
        }
        if self.reapplication_complier_weight < 0.0 {
            return bad("reapplication_complier_weight must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceType {
    Complier,
    NeverTaker,
    Defier,
}

/// The latent side of one simulated person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentUnit {
    pub person_id: String,
    pub first_year: i32,
    pub z: bool,
    pub d: bool,
    pub compliance: ComplianceType,
    pub commuter: bool,
    pub participations: usize,
    /// Year of a later win that moved a complier.
    pub late_move_year: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTruth {
    pub late: f64,
    pub complier_y0: f64,
    pub per_period: BTreeMap<u32, f64>,
    pub complier_y0_per_period: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTruth {
    pub first_stage: f64,
    pub outcomes: BTreeMap<OutcomeKind, OutcomeTruth>,
}

impl GroupTruth {
    pub fn late(&self, outcome: OutcomeKind) -> f64 {
        self.outcomes[&outcome].late
    }
}

/// Structural truths for first-participation estimands when nobody reapplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub all: GroupTruth,
    pub commuter: GroupTruth,
    pub non_commuter: GroupTruth,
}

impl GroundTruth {
    pub fn group(&self, subgroup: Subgroup) -> &GroupTruth {
        match subgroup {
            Subgroup::All => &self.all,
            Subgroup::Commuter => &self.commuter,
            Subgroup::NonCommuter => &self.non_commuter,
        }
    }
}

/// Per-period complier effect and untreated mean for one outcome at period `t`.
fn period_truth(cfg: &DgpConfig, g: &GroupModel, outcome: OutcomeKind, t: u32) -> (f64, f64) {
    let e = g.employment;
    let r = g.residence;
    let cum = f64::from(t - 1);
    match outcome {
        OutcomeKind::ResidingBinary => (r.effect(), r.complier_untreated),
        OutcomeKind::EmployedBinary => (e.effect(), e.complier_untreated),
        OutcomeKind::ActivityLevelPct => {
            let m = cfg.activity.mean();
            (e.effect() * m, e.complier_untreated * m)
        }
        OutcomeKind::YearsResiding => (cum * r.effect(), cum * r.complier_untreated),
        OutcomeKind::YearsEmployed => (cum * e.effect(), cum * e.complier_untreated),
    }
}

/// Expected outcome rows per period: cohorts whose window still reaches `t`.
fn row_weights(cfg: &DgpConfig) -> BTreeMap<u32, f64> {
    let max_period = (cfg.last_outcome_year - cfg.first_year) as u32;
    (2..=max_period)
        .map(|t| {
            let rows: u32 = cfg
                .window_years()
                .filter(|y| y + t as i32 <= cfg.last_outcome_year)
                .map(|y| cfg.applicants(y))
                .sum();
            (t, f64::from(rows))
        })
        .collect()
}

fn group_truth(cfg: &DgpConfig, commuter_weight: f64) -> GroupTruth {
    let weights = row_weights(cfg);
    let total: f64 = weights.values().sum();
    let mix = |outcome, t| {
        let (dc, yc) = period_truth(cfg, &cfg.commuter, outcome, t);
        let (dn, yn) = period_truth(cfg, &cfg.non_commuter, outcome, t);
        (
            commuter_weight * dc + (1.0 - commuter_weight) * dn,
            commuter_weight * yc + (1.0 - commuter_weight) * yn,
        )
    };
    let outcomes = OutcomeKind::ALL
        .iter()
        .map(|&outcome| {
            let mut truth = OutcomeTruth {
                late: 0.0,
                complier_y0: 0.0,
                per_period: BTreeMap::new(),
                complier_y0_per_period: BTreeMap::new(),
            };
            for (&t, &w) in &weights {
                let (delta, y0) = mix(outcome, t);
                truth.per_period.insert(t, delta);
                truth.complier_y0_per_period.insert(t, y0);
                truth.late += w * delta / total;
                truth.complier_y0 += w * y0 / total;
            }
            (outcome, truth)
        })
        .collect();
    GroupTruth {
        first_stage: cfg.complier_share - cfg.defier_share,
        outcomes,
    }
}

/// Closed-form truths. Pooled values weight periods by expected row counts.
pub fn true_late(cfg: &DgpConfig) -> Result<GroundTruth, DgpError> {
    cfg.validate()?;
    Ok(GroundTruth {
        all: group_truth(cfg, cfg.commuter_share),
        commuter: group_truth(cfg, 1.0),
        non_commuter: group_truth(cfg, 0.0),
    })
}

/// Simulated outcome path over periods `1..=periods`.
#[derive(Debug, Clone, Default)]
struct Trajectory {
    residing: Vec<bool>,
    employed: Vec<bool>,
    activity: Vec<f64>,
}

fn chain_step<R: Rng>(rng: &mut R, prev: Option<bool>, p: f64, persistence: f64) -> bool {
    match prev {
        Some(state) if rng.random_bool(persistence) => state,
        _ => rng.random_bool(p),
    }
}

/// `move_period` is the period in which the unit moves (1 for treated
/// compliers, later for late winners, `None` for never movers).
fn simulate_path<R: Rng>(
    rng: &mut R,
    cfg: &DgpConfig,
    activity: &WeightedIndex<f64>,
    group: &GroupModel,
    complier_like: bool,
    move_period: Option<u32>,
    periods: u32,
) -> Trajectory {
    let untreated = |t: TypeProbs| {
        if complier_like {
            t.complier_untreated
        } else {
            t.never_taker
        }
    };
    let mut path = Trajectory::default();
    let mut residing = None;
    let mut employed = None;
    for t in 1..=periods {
        let treated = move_period.is_some_and(|m| t >= m);
        let switch = move_period == Some(t);
        let (pe, pr) = if treated {
            (
                group.employment.complier_treated,
                group.residence.complier_treated,
            )
        } else {
            (untreated(group.employment), untreated(group.residence))
        };
        if switch {
            employed = None;
        }
        let e = chain_step(rng, employed, pe, cfg.persistence);
        let r = if switch {
            residing = None;
            true
        } else if t == 1 {
            false
        } else {
            let prev = if move_period == Some(t - 1) {
                None
            } else {
                residing
            };
            chain_step(rng, prev, pr, cfg.persistence)
        };
        let a = if e {
            cfg.activity.levels[activity.sample(rng)]
        } else {
            0.0
        };
        employed = Some(e);
        if !switch && t > 1 {
            residing = Some(r);
        }
        path.employed.push(e);
        path.residing.push(r);
        path.activity.push(a);
    }
    path
}

/// Monte Carlo check of a pooled truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McTruth {
    pub outcome: OutcomeKind,
    pub late: f64,
    pub late_se: f64,
    pub complier_y0: f64,
    pub complier_y0_se: f64,
}

fn outcome_values(path: &Trajectory, outcome: OutcomeKind) -> Vec<f64> {
    let mut years_r = 0u32;
    let mut years_e = 0u32;
    (2..=path.employed.len())
        .map(|t| {
            let i = t - 1;
            years_r += u32::from(path.residing[i]);
            years_e += u32::from(path.employed[i]);
            match outcome {
                OutcomeKind::ResidingBinary => f64::from(u8::from(path.residing[i])),
                OutcomeKind::EmployedBinary => f64::from(u8::from(path.employed[i])),
                OutcomeKind::ActivityLevelPct => path.activity[i],
                OutcomeKind::YearsResiding => f64::from(years_r),
                OutcomeKind::YearsEmployed => f64::from(years_e),
            }
        })
        .collect()
}

/// Simulates `n` compliers' treated and untreated paths with the generator's
/// own path code and returns row-pooled effects with delta-method standard
/// errors.
pub fn monte_carlo_truth(
    cfg: &DgpConfig,
    subgroup: Subgroup,
    n: usize,
    seed: u64,
) -> Result<Vec<McTruth>, DgpError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let activity = activity_index(cfg)?;
    let years: Vec<i32> = cfg.window_years().collect();
    let year_index = WeightedIndex::new(years.iter().map(|y| f64::from(cfg.applicants(*y))))
        .map_err(|e| DgpError::Config(format!("applicant counts: {e}")))?;

    let k = OutcomeKind::ALL.len();
    let mut units: Vec<(f64, [f64; 5], [f64; 5])> = Vec::with_capacity(n);
    for _ in 0..n {
        let commuter = match subgroup {
            Subgroup::All => rng.random_bool(cfg.commuter_share),
            Subgroup::Commuter => true,
            Subgroup::NonCommuter => false,
        };
        let y = years[year_index.sample(&mut rng)];
        let periods = (cfg.last_outcome_year - y) as u32;
        let g = cfg.group(commuter);
        let treated = simulate_path(&mut rng, cfg, &activity, g, true, Some(1), periods);
        let untreated = simulate_path(&mut rng, cfg, &activity, g, true, None, periods);
        let mut diff = [0.0; 5];
        let mut y0 = [0.0; 5];
        for (j, outcome) in OutcomeKind::ALL.iter().enumerate() {
            let v1 = outcome_values(&treated, *outcome);
            let v0 = outcome_values(&untreated, *outcome);
            diff[j] = v1.iter().sum::<f64>() - v0.iter().sum::<f64>();
            y0[j] = v0.iter().sum();
        }
        units.push((f64::from(periods - 1), diff, y0));
    }

    let rows: f64 = units.iter().map(|u| u.0).sum();
    let ratio = |j: usize, pick: fn(&(f64, [f64; 5], [f64; 5])) -> &[f64; 5]| {
        let est = units.iter().map(|u| pick(u)[j]).sum::<f64>() / rows;
        let ss: f64 = units.iter().map(|u| (pick(u)[j] - est * u.0).powi(2)).sum();
        (est, ss.sqrt() / rows)
    };
    Ok((0..k)
        .map(|j| {
            let (late, late_se) = ratio(j, |u| &u.1);
            let (complier_y0, complier_y0_se) = ratio(j, |u| &u.2);
            McTruth {
                outcome: OutcomeKind::ALL[j],
                late,
                late_se,
                complier_y0,
                complier_y0_se,
            }
        })
        .collect())
}

fn activity_index(cfg: &DgpConfig) -> Result<WeightedIndex<f64>, DgpError> {
    WeightedIndex::new(cfg.activity.weights.iter().copied())
        .map_err(|e| DgpError::Config(format!("activity weights: {e}")))
}

/// One draw from the DGP.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub lottery: Vec<LotteryRecord>,
    pub employment: Vec<EmploymentRecord>,
    pub latent: Vec<LatentUnit>,
    pub truth: GroundTruth,
}

impl SyntheticData {
    /// Writes `lottery.csv` and `employment.csv` into `dir`.
    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<(), DgpError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| DgpError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let create = |name: &str| {
            let path = dir.join(name);
            fs::File::create(&path)
                .map(std::io::BufWriter::new)
                .map_err(|source| DgpError::Io {
                    path: path.display().to_string(),
                    source,
                })
        };
        write_lottery(&self.lottery, create("lottery.csv")?)?;
        write_employment(&self.employment, create("employment.csv")?)?;
        Ok(())
    }

    pub fn lottery_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_lottery(&self.lottery, &mut buf).expect("in-memory write");
        buf
    }

    pub fn employment_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_employment(&self.employment, &mut buf).expect("in-memory write");
        buf
    }
}

struct Person {
    demographics: Demographics,
    compliance: ComplianceType,
    commuter: bool,
    first_year: i32,
    /// (year, season, won)
    applications: Vec<(i32, Season, bool)>,
}

impl Person {
    fn moves_on_win(&self) -> bool {
        self.compliance == ComplianceType::Complier
    }

    fn last(&self) -> (i32, bool) {
        let (y, _, won) = *self.applications.last().expect("at least one application");
        (y, won)
    }
}

fn draw_person<R: Rng>(
    rng: &mut R,
    cfg: &DgpConfig,
    year: i32,
    nationality: &WeightedIndex<f64>,
    age: &Normal<f64>,
) -> Person {
    let d = &cfg.demographics;
    let nat = d.nationality_weights()[nationality.sample(rng)].0;
    let gender = if rng.random_bool(d.female_share) {
        Gender::Female
    } else {
        Gender::Male
    };
    let a = loop {
        let a = age.sample(rng);
        if (d.age_min..=d.age_max).contains(&a) {
            break a.round() as i32;
        }
    };
    let u: f64 = rng.random();
    let compliance = if u < cfg.complier_share {
        ComplianceType::Complier
    } else if u < cfg.complier_share + cfg.defier_share {
        ComplianceType::Defier
    } else {
        ComplianceType::NeverTaker
    };
    let season = random_season(rng);
    Person {
        demographics: Demographics {
            birth_year: Some(year - a),
            nationality: Some(nat),
            gender: Some(gender),
        },
        compliance,
        commuter: rng.random_bool(cfg.commuter_share),
        first_year: year,
        applications: vec![(year, season, false)],
    }
}

fn random_season<R: Rng>(rng: &mut R) -> Season {
    if rng.random_bool(0.5) {
        Season::Spring
    } else {
        Season::Fall
    }
}

/// Draws one synthetic data set.
pub fn generate(cfg: &DgpConfig, seed: u64) -> Result<SyntheticData, DgpError> {
    cfg.validate()?;
    let truth = true_late(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = &cfg.demographics;
    let nationality = WeightedIndex::new(d.nationality_weights().iter().map(|(_, w)| *w))
        .map_err(|e| DgpError::Config(format!("nationality shares: {e}")))?;
    let age = Normal::new(d.age_mean, d.age_sd)
        .map_err(|e| DgpError::Config(format!("age distribution: {e}")))?;
    let activity = activity_index(cfg)?;

    // first participants, in year order
    let mut first_counts: BTreeMap<i32, u32> = cfg.out_of_window_applicants.clone();
    for y in cfg.window_years() {
        first_counts.insert(y, cfg.applicants(y));
    }
    let mut persons: Vec<Person> = Vec::new();
    for (&year, &count) in &first_counts {
        let start = persons.len();
        for _ in 0..count {
            persons.push(draw_person(&mut rng, cfg, year, &nationality, &age));
        }
        let exact = cfg
            .winners_per_year
            .as_ref()
            .and_then(|w| w.get(&year).copied());
        match exact {
            Some(w) => {
                let idx = rand::seq::index::sample(&mut rng, count as usize, w as usize);
                for i in idx {
                    persons[start + i].applications[0].2 = true;
                }
            }
            None => {
                let p = cfg.win_prob(year);
                for person in &mut persons[start..] {
                    person.applications[0].2 = rng.random_bool(p);
                }
            }
        }
    }

    reapply(&mut rng, cfg, &mut persons)?;

    let mut lottery = Vec::new();
    let mut employment = Vec::new();
    let mut latent = Vec::with_capacity(persons.len());
    for (i, person) in persons.iter().enumerate() {
        let id = format!("P{:06}", i + 1);
        let z = person.applications[0].2;
        let d = match person.compliance {
            ComplianceType::Complier => z,
            ComplianceType::Defier => !z,
            ComplianceType::NeverTaker => false,
        };
        let late_move_year = if d || !person.moves_on_win() {
            None
        } else {
            person
                .applications
                .iter()
                .skip(1)
                .find(|a| a.2)
                .map(|a| a.0 + 1)
        };
        let move_period = if d {
            Some(1)
        } else {
            late_move_year.map(|y| (y - person.first_year) as u32)
        };

        let t0 = person.first_year;
        let periods = (cfg.last_outcome_year - t0).max(0) as u32;
        let path = simulate_path(
            &mut rng,
            cfg,
            &activity,
            cfg.group(person.commuter),
            person.compliance != ComplianceType::NeverTaker,
            move_period,
            periods,
        );
        let start = (t0 - 1).max(cfg.employment_first_year);
        for year in start..=cfg.last_outcome_year {
            let (employed, resides, level) = if year <= t0 {
                let level = if person.commuter {
                    cfg.activity.levels[activity.sample(&mut rng)]
                } else {
                    0.0
                };
                (person.commuter, false, level)
            } else {
                let i = (year - t0 - 1) as usize;
                (path.employed[i], path.residing[i], path.activity[i])
            };
            if employed || resides {
                employment.push(EmploymentRecord {
                    person_id: id.clone(),
                    year,
                    employed,
                    activity_level: level,
                    resides_in_li: resides,
                    demographics: person.demographics,
                });
            }
        }

        for &(year, season, won) in &person.applications {
            lottery.push(LotteryRecord {
                person_id: id.clone(),
                lottery_year: year,
                lottery_season: season,
                predraw_won: won,
                demographics: reported(&mut rng, cfg, &person.demographics),
            });
        }
        latent.push(LatentUnit {
            person_id: id,
            first_year: t0,
            z,
            d,
            compliance: person.compliance,
            commuter: person.commuter,
            participations: person.applications.len(),
            late_move_year,
        });
    }
    lottery.sort_by(|a, b| {
        (a.lottery_year, a.lottery_season, &a.person_id).cmp(&(
            b.lottery_year,
            b.lottery_season,
            &b.person_id,
        ))
    });
    Ok(SyntheticData {
        lottery,
        employment,
        latent,
        truth,
    })
}

/// Lottery-form version of the true demographics.
fn reported<R: Rng>(rng: &mut R, cfg: &DgpConfig, truth: &Demographics) -> Demographics {
    let d = &cfg.demographics;
    let mut out = *truth;
    if rng.random_bool(d.missing_birth_year) {
        out.birth_year = None;
    }
    if rng.random_bool(d.missing_nationality) {
        out.nationality = None;
    } else if rng.random_bool(d.nationality_mismatch) {
        let others: Vec<Nationality> = Nationality::ALL
            .iter()
            .copied()
            .filter(|n| Some(*n) != truth.nationality)
            .collect();
        out.nationality = others.choose(rng).copied();
    }
    out
}

/// Losers may apply again the following year, either independently with
/// `reapplication_prob` or, when `reapplication_records` is set, as an exact
/// number of reapplications spread evenly over the years.
fn reapply<R: Rng>(rng: &mut R, cfg: &DgpConfig, persons: &mut [Person]) -> Result<(), DgpError> {
    let first = persons
        .iter()
        .map(|p| p.first_year)
        .min()
        .unwrap_or(cfg.first_year);
    let weight = |p: &Person| {
        if p.moves_on_win() {
            cfg.reapplication_complier_weight
        } else {
            1.0
        }
    };
    let mut remaining = cfg.reapplication_records;
    for year in first..cfg.lottery_last_year {
        let losers: Vec<usize> = persons
            .iter()
            .enumerate()
            .filter(|(_, p)| p.last() == (year, false))
            .map(|(i, _)| i)
            .collect();
        let chosen: Vec<usize> = match remaining.as_mut() {
            Some(left) => {
                let years_left = (cfg.lottery_last_year - year) as usize;
                let take = left.div_ceil(years_left).min(losers.len());
                *left -= take;
                let picked = losers
                    .choose_multiple_weighted(rng, take, |i| weight(&persons[*i]).max(1e-12))
                    .map_err(|e| DgpError::Config(format!("reapplication weights: {e}")))?;
                let mut picked: Vec<usize> = picked.copied().collect();
                picked.sort_unstable();
                picked
            }
            None => losers
                .into_iter()
                .filter(|i| {
                    let p = (cfg.reapplication_prob * weight(&persons[*i])).min(1.0);
                    rng.random_bool(p)
                })
                .collect(),
        };
        let p_win = cfg.win_prob(year + 1);
        for i in chosen {
            let season = random_season(rng);
            let won = rng.random_bool(p_win);
            persons[i].applications.push((year + 1, season, won));
        }
    }
    if let (Some(left), Some(requested)) = (remaining, cfg.reapplication_records) {
        if left > 0 {
            return Err(DgpError::Reapplication {
                placed: requested - left,
                requested,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips_through_toml() {
        let cfg = DgpConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        assert_eq!(DgpConfig::from_toml_str(&text).unwrap(), cfg);
        let cfg = DgpConfig::paper_shaped();
        assert_eq!(
            DgpConfig::from_toml_str(&cfg.to_toml_string()).unwrap(),
            cfg
        );
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg =
            DgpConfig::from_toml_str("complier_share = 0.5\n[win_prob_per_year]\n2008 = 0.2\n")
                .unwrap();
        assert_eq!(cfg.complier_share, 0.5);
        assert_eq!(cfg.win_prob(2008), 0.2);
        assert_eq!(cfg.win_prob(2009), 0.11);
        assert_eq!(cfg.persistence, 0.8);
    }

    #[test]
    fn invalid_probabilities_are_rejected() {
        assert!(DgpConfig::from_toml_str("complier_share = 1.5").is_err());
        assert!(DgpConfig::from_toml_str("default_win_prob = 0.0").is_err());
        assert!(DgpConfig::from_toml_str("[win_prob_per_year]\n2010 = 1.0").is_err());
        assert!(DgpConfig::from_toml_str("complier_share = 0.7\ndefier_share = 0.4").is_err());
    }

    #[test]
    fn default_truths() {
        let t = true_late(&DgpConfig::default()).unwrap();
        assert_eq!(t.all.first_stage, 0.36);
        assert!((t.all.late(OutcomeKind::EmployedBinary) - 0.24).abs() < 1e-12);
        assert!((t.all.late(OutcomeKind::ResidingBinary) - 0.71).abs() < 1e-12);
        for v in t.all.outcomes[&OutcomeKind::ResidingBinary]
            .per_period
            .values()
        {
            assert!((v - 0.71).abs() < 1e-12);
        }
        let years = &t.all.outcomes[&OutcomeKind::YearsEmployed].per_period;
        assert!((years[&5] - 4.0 * 0.24).abs() < 1e-12);
    }

    #[test]
    fn heterogeneity_truths() {
        let t = true_late(&DgpConfig::heterogeneity()).unwrap();
        assert!((t.commuter.late(OutcomeKind::EmployedBinary) - 0.11).abs() < 1e-12);
        assert!((t.non_commuter.late(OutcomeKind::EmployedBinary) - 0.34).abs() < 1e-12);
    }

    #[test]
    fn winners_and_losers_follow_compliance() {
        let data = generate(&DgpConfig::default(), 1).unwrap();
        assert_eq!(data.latent.len(), 3145);
        for u in &data.latent {
            assert_eq!(u.d, u.z && u.compliance == ComplianceType::Complier);
        }
    }
}
