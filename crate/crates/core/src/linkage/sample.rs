use serde::{Deserialize, Serialize};

use super::{Demographics, LinkageError, LinkedPanel, PersonHistory, Season};

/// Calendar limits of the evaluation sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleWindow {
    /// Earliest admissible first-participation year (needs employment data
    /// for the preceding year).
    pub first_year: i32,
    /// Latest admissible anchor-participation year.
    pub last_year: i32,
    /// Last calendar year with observed outcomes.
    pub last_outcome_year: i32,
}

impl Default for SampleWindow {
    fn default() -> Self {
        Self {
            first_year: 2006,
            last_year: 2016,
            last_outcome_year: 2018,
        }
    }
}

impl SampleWindow {
    pub fn validate(&self) -> Result<(), LinkageError> {
        if self.first_year > self.last_year {
            return Err(LinkageError::Window(format!(
                "first year {} after last year {}",
                self.first_year, self.last_year
            )));
        }
        if self.last_year + 2 > self.last_outcome_year {
            return Err(LinkageError::Window(format!(
                "last lottery year {} leaves no outcome period before {}",
                self.last_year, self.last_outcome_year
            )));
        }
        Ok(())
    }

    pub fn max_period(&self) -> u32 {
        (self.last_outcome_year - self.first_year) as u32
    }
}

/// Outcomes of one participant in one outcome period `t >= 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub period: u32,
    pub residing: bool,
    pub employed: bool,
    pub activity_level: f64,
    /// Years residing in periods `2..=period`.
    pub years_residing: u32,
    /// Years employed in periods `2..=period`.
    pub years_employed: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    /// Person identifier; the bootstrap resamples on it.
    pub cluster_id: String,
    /// Which participation (1-based) anchors this unit.
    pub participation: usize,
    /// Year of the anchoring participation.
    pub t0: i32,
    pub season: Season,
    /// Pre-draw won at the anchoring participation.
    pub z: bool,
    /// Resides in the country in `t0 + 1`.
    pub d: bool,
    /// Employed in the country in `t0 - 1` while residing abroad.
    pub commuter_at_baseline: bool,
    pub demographics: Demographics,
    pub outcomes: Vec<OutcomeRow>,
}

impl Participant {
    pub fn age(&self) -> Option<i32> {
        self.demographics.birth_year.map(|b| self.t0 - b)
    }
}

/// Counts behind every sample restriction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionLedger {
    pub raw_lottery_records: usize,
    /// Persons with at least one lottery record (one first participation each).
    pub lottery_persons: usize,
    pub employment_only_persons: usize,
    pub fewer_participations: usize,
    pub first_participation_before_window: usize,
    pub participation_after_window: usize,
    pub included: usize,
    /// Included units with `D = 1` and `Z = 0`.
    pub monotonicity_violations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSample {
    pub participants: Vec<Participant>,
    pub window: Option<SampleWindow>,
    pub ledger: ExclusionLedger,
    pub notices: Vec<String>,
}

impl EvaluationSample {
    pub fn from_participants(participants: Vec<Participant>) -> Self {
        Self {
            participants,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.participants.iter().map(|p| p.outcomes.len()).sum()
    }

    pub fn n_winners(&self) -> usize {
        self.participants.iter().filter(|p| p.z).count()
    }

    pub fn filter<F: Fn(&Participant) -> bool>(&self, keep: F) -> Self {
        Self {
            participants: self
                .participants
                .iter()
                .filter(|p| keep(p))
                .cloned()
                .collect(),
            window: self.window,
            ledger: self.ledger,
            notices: self.notices.clone(),
        }
    }
}

fn build_unit(person: &PersonHistory, k: usize, window: &SampleWindow) -> Participant {
    let anchor = person.participations[k - 1];
    let t0 = anchor.year;
    let d = person
        .employment_in(t0 + 1)
        .map(|e| e.resides_in_li)
        .unwrap_or(false);
    let commuter_at_baseline = person
        .employment_in(t0 - 1)
        .map(|e| e.employed && !e.resides_in_li)
        .unwrap_or(false);

    let mut outcomes = Vec::new();
    let mut years_residing = 0;
    let mut years_employed = 0;
    let last_period = (window.last_outcome_year - t0).max(1) as u32;
    for period in 2..=last_period {
        let year = t0 + period as i32;
        let (residing, employed, activity_level) = match person.employment_in(year) {
            Some(e) => (e.resides_in_li, e.employed, e.activity_level),
            None => (false, false, 0.0),
        };
        years_residing += residing as u32;
        years_employed += employed as u32;
        outcomes.push(OutcomeRow {
            period,
            residing,
            employed,
            activity_level,
            years_residing,
            years_employed,
        });
    }

    Participant {
        cluster_id: person.person_id.clone(),
        participation: k,
        t0,
        season: anchor.season,
        z: anchor.predraw_won,
        d,
        commuter_at_baseline,
        demographics: person.demographics,
        outcomes,
    }
}

/// Evaluation sample anchored at each person's first lottery participation.
pub fn build_evaluation_sample(
    panel: &LinkedPanel,
    window: SampleWindow,
) -> Result<EvaluationSample, LinkageError> {
    select_participation(panel, 1, window)
}

/// Evaluation sample anchored at the `k`-th participation.
///
/// A person enters when their first participation is not before
/// `window.first_year` and their `k`-th participation is not after
/// `window.last_year`. Persons with fewer than `k` participations are
/// counted and skipped.
pub fn select_participation(
    panel: &LinkedPanel,
    k: usize,
    window: SampleWindow,
) -> Result<EvaluationSample, LinkageError> {
    if k == 0 {
        return Err(LinkageError::ParticipationIndex);
    }
    window.validate()?;

    let mut ledger = ExclusionLedger {
        raw_lottery_records: panel.raw_lottery_records,
        ..ExclusionLedger::default()
    };
    let mut notices = Vec::new();
    let mut participants = Vec::new();

    for person in panel.persons.values() {
        let Some(first) = person.participations.first() else {
            ledger.employment_only_persons += 1;
            continue;
        };
        ledger.lottery_persons += 1;
        if person.participations.len() < k {
            ledger.fewer_participations += 1;
            continue;
        }
        if first.year < window.first_year {
            ledger.first_participation_before_window += 1;
            continue;
        }
        if person.participations[k - 1].year > window.last_year {
            ledger.participation_after_window += 1;
            continue;
        }
        let unit = build_unit(person, k, &window);
        if unit.d && !unit.z {
            ledger.monotonicity_violations += 1;
        }
        participants.push(unit);
    }
    ledger.included = participants.len();

    if k > panel.max_participations() {
        notices.push(format!(
            "no person has {k} lottery participations (maximum is {}); the sample is empty",
            panel.max_participations()
        ));
    }
    if ledger.monotonicity_violations > 0 {
        notices.push(format!(
            "{} units reside in the country after losing the pre-draw (D = 1, Z = 0)",
            ledger.monotonicity_violations
        ));
    }
    for n in &notices {
        log::warn!("{n}");
    }

    Ok(EvaluationSample {
        participants,
        window: Some(window),
        ledger,
        notices,
    })
}
