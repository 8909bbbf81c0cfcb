//! Record linkage between lottery records and employment statistics, and
//! construction of the evaluation sample.

mod io;
mod sample;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{
    load_employment_csv, load_lottery_csv, read_employment, read_lottery, write_employment,
    write_lottery, EMPLOYMENT_HEADER, LOTTERY_HEADER,
};
pub use sample::{
    build_evaluation_sample, select_participation, EvaluationSample, ExclusionLedger, OutcomeRow,
    Participant, SampleWindow,
};

#[derive(Debug, Error)]
pub enum LinkageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("line {line}: {message}")]
    Record { line: u64, message: String },
    #[error("line {line}: duplicate {what} for person `{person_id}`")]
    Duplicate {
        line: u64,
        person_id: String,
        what: String,
    },
    #[error("participation index must be at least 1")]
    ParticipationIndex,
    #[error("invalid sample window: {0}")]
    Window(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Spring,
    Fall,
}

impl Season {
    pub fn as_str(self) -> &'static str {
        match self {
            Season::Spring => "spring",
            Season::Fall => "fall",
        }
    }
}

impl FromStr for Season {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spring" => Ok(Season::Spring),
            "fall" => Ok(Season::Fall),
            other => Err(format!("unknown lottery season `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Nationality {
    #[serde(rename = "AT")]
    Austria,
    #[serde(rename = "DE")]
    Germany,
    #[serde(rename = "IT")]
    Italy,
    #[serde(rename = "CH")]
    Switzerland,
    #[serde(rename = "OTHER")]
    Other,
}

impl Nationality {
    pub const ALL: [Nationality; 5] = [
        Nationality::Austria,
        Nationality::Germany,
        Nationality::Italy,
        Nationality::Switzerland,
        Nationality::Other,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Nationality::Austria => "AT",
            Nationality::Germany => "DE",
            Nationality::Italy => "IT",
            Nationality::Switzerland => "CH",
            Nationality::Other => "OTHER",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nationality::Austria => "Austria",
            Nationality::Germany => "Germany",
            Nationality::Italy => "Italy",
            Nationality::Switzerland => "Switzerland",
            Nationality::Other => "Others",
        }
    }
}

impl FromStr for Nationality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AT" => Ok(Nationality::Austria),
            "DE" => Ok(Nationality::Germany),
            "IT" => Ok(Nationality::Italy),
            "CH" => Ok(Nationality::Switzerland),
            "OTHER" => Ok(Nationality::Other),
            other => Err(format!("unknown nationality `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" => Ok(Gender::Female),
            "male" => Ok(Gender::Male),
            other => Err(format!("unknown gender `{other}`")),
        }
    }
}

/// Person characteristics. `None` marks a missing value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub birth_year: Option<i32>,
    pub nationality: Option<Nationality>,
    pub gender: Option<Gender>,
}

impl Demographics {
    pub fn birth_year_missing(&self) -> bool {
        self.birth_year.is_none()
    }

    pub fn nationality_missing(&self) -> bool {
        self.nationality.is_none()
    }

    pub fn gender_missing(&self) -> bool {
        self.gender.is_none()
    }
}

/// One application to one lottery draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryRecord {
    pub person_id: String,
    pub lottery_year: i32,
    pub lottery_season: Season,
    pub predraw_won: bool,
    pub demographics: Demographics,
}

/// One person-year of the employment statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmploymentRecord {
    pub person_id: String,
    pub year: i32,
    /// Dependent or self-employment in the country.
    pub employed: bool,
    /// Activity level in percent, zero when not employed.
    pub activity_level: f64,
    pub resides_in_li: bool,
    pub demographics: Demographics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Participation {
    pub year: i32,
    pub season: Season,
    pub predraw_won: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmploymentYear {
    pub employed: bool,
    pub activity_level: f64,
    pub resides_in_li: bool,
}

/// Linked history of a single person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonHistory {
    pub person_id: String,
    /// Lottery participations ordered by (year, season).
    pub participations: Vec<Participation>,
    pub employment: BTreeMap<i32, EmploymentYear>,
    pub demographics: Demographics,
}

impl PersonHistory {
    pub fn employment_in(&self, year: i32) -> Option<&EmploymentYear> {
        self.employment.get(&year)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkedPanel {
    pub persons: BTreeMap<String, PersonHistory>,
    pub raw_lottery_records: usize,
    pub raw_employment_records: usize,
    pub warnings: Vec<String>,
}

impl LinkedPanel {
    pub fn len(&self) -> usize {
        self.persons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persons.is_empty()
    }

    pub fn max_participations(&self) -> usize {
        self.persons
            .values()
            .map(|p| p.participations.len())
            .max()
            .unwrap_or(0)
    }
}

/// Most frequent value; ties go to the value observed latest in `values`.
/// `values` must be ordered oldest first.
fn modal_latest<T: Copy + PartialEq>(values: &[T]) -> Option<T> {
    let mut best: Option<(T, usize, usize)> = None;
    for (i, v) in values.iter().enumerate() {
        let count = values.iter().filter(|w| *w == v).count();
        let last = values.iter().rposition(|w| w == v).unwrap_or(i);
        match best {
            Some((_, c, l)) if c > count || (c == count && l >= last) => {}
            _ => best = Some((*v, count, last)),
        }
    }
    best.map(|(v, _, _)| v)
}

fn resolve_field<T: Copy + PartialEq + fmt::Debug>(
    person_id: &str,
    field: &str,
    employment: &[T],
    lottery: &[T],
    warnings: &mut Vec<String>,
) -> Option<T> {
    if let Some(first) = employment.first() {
        if employment.iter().any(|v| v != first) {
            let chosen = modal_latest(employment);
            warnings.push(format!(
                "person {person_id}: conflicting {field} in employment statistics, using {chosen:?}"
            ));
            return chosen;
        }
        return Some(*first);
    }
    modal_latest(lottery)
}

/// Link lottery and employment records on the person identifier.
///
/// Employment statistics take priority for demographics. Persons present in
/// only one source are kept.
pub fn link_records(lottery: &[LotteryRecord], employment: &[EmploymentRecord]) -> LinkedPanel {
    let mut lottery_by_person: BTreeMap<&str, Vec<&LotteryRecord>> = BTreeMap::new();
    for rec in lottery {
        lottery_by_person
            .entry(rec.person_id.as_str())
            .or_default()
            .push(rec);
    }
    let mut employment_by_person: BTreeMap<&str, Vec<&EmploymentRecord>> = BTreeMap::new();
    for rec in employment {
        employment_by_person
            .entry(rec.person_id.as_str())
            .or_default()
            .push(rec);
    }

    let mut ids: Vec<&str> = lottery_by_person
        .keys()
        .chain(employment_by_person.keys())
        .copied()
        .collect();
    ids.sort_unstable();
    ids.dedup();

    let mut warnings = Vec::new();
    let mut persons = BTreeMap::new();
    for id in ids {
        let mut lot: Vec<&LotteryRecord> = lottery_by_person.remove(id).unwrap_or_default();
        lot.sort_by_key(|r| (r.lottery_year, r.lottery_season));
        let mut emp: Vec<&EmploymentRecord> = employment_by_person.remove(id).unwrap_or_default();
        emp.sort_by_key(|r| r.year);

        let participations = lot
            .iter()
            .map(|r| Participation {
                year: r.lottery_year,
                season: r.lottery_season,
                predraw_won: r.predraw_won,
            })
            .collect();
        let employment_years = emp
            .iter()
            .map(|r| {
                (
                    r.year,
                    EmploymentYear {
                        employed: r.employed,
                        activity_level: r.activity_level,
                        resides_in_li: r.resides_in_li,
                    },
                )
            })
            .collect();

        let emp_birth: Vec<i32> = emp
            .iter()
            .filter_map(|r| r.demographics.birth_year)
            .collect();
        let lot_birth: Vec<i32> = lot
            .iter()
            .filter_map(|r| r.demographics.birth_year)
            .collect();
        let emp_nat: Vec<Nationality> = emp
            .iter()
            .filter_map(|r| r.demographics.nationality)
            .collect();
        let lot_nat: Vec<Nationality> = lot
            .iter()
            .filter_map(|r| r.demographics.nationality)
            .collect();
        let emp_gender: Vec<Gender> = emp.iter().filter_map(|r| r.demographics.gender).collect();
        let lot_gender: Vec<Gender> = lot.iter().filter_map(|r| r.demographics.gender).collect();

        let demographics = Demographics {
            birth_year: resolve_field(id, "birth_year", &emp_birth, &lot_birth, &mut warnings),
            nationality: resolve_field(id, "nationality", &emp_nat, &lot_nat, &mut warnings),
            gender: resolve_field(id, "gender", &emp_gender, &lot_gender, &mut warnings),
        };

        persons.insert(
            id.to_string(),
            PersonHistory {
                person_id: id.to_string(),
                participations,
                employment: employment_years,
                demographics,
            },
        );
    }

    for w in &warnings {
        log::warn!("{w}");
    }

    LinkedPanel {
        persons,
        raw_lottery_records: lottery.len(),
        raw_employment_records: employment.len(),
        warnings,
    }
}
