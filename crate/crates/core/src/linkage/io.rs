use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{
    Demographics, EmploymentRecord, Gender, LinkageError, LotteryRecord, Nationality, Season,
};

pub const LOTTERY_HEADER: [&str; 7] = [
    "person_id",
    "lottery_year",
    "lottery_season",
    "predraw_won",
    "birth_year",
    "nationality",
    "gender",
];

pub const EMPLOYMENT_HEADER: [&str; 8] = [
    "person_id",
    "year",
    "employed",
    "activity_level",
    "resides_in_li",
    "birth_year",
    "nationality",
    "gender",
];

fn open(path: &Path) -> Result<File, LinkageError> {
    File::open(path).map_err(|source| LinkageError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_lottery_csv(path: impl AsRef<Path>) -> Result<Vec<LotteryRecord>, LinkageError> {
    read_lottery(open(path.as_ref())?)
}

pub fn load_employment_csv(path: impl AsRef<Path>) -> Result<Vec<EmploymentRecord>, LinkageError> {
    read_employment(open(path.as_ref())?)
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), LinkageError> {
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != expected {
        return Err(LinkageError::Header {
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(())
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_year(cell: &str, column: &str, line: u64) -> Result<i32, LinkageError> {
    cell.trim().parse().map_err(|_| LinkageError::Record {
        line,
        message: format!("malformed {column} `{cell}`"),
    })
}

fn parse_flag(cell: &str, column: &str, line: u64) -> Result<bool, LinkageError> {
    match cell.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(LinkageError::Record {
            line,
            message: format!("malformed {column} flag `{other}` (expected 1 or 0)"),
        }),
    }
}

/// Demographic cells never fail a row: anything unparseable becomes missing.
fn parse_demographics(birth: &str, nationality: &str, gender: &str) -> Demographics {
    Demographics {
        birth_year: birth.trim().parse().ok(),
        nationality: nationality.parse::<Nationality>().ok(),
        gender: gender.parse::<Gender>().ok(),
    }
}

pub fn read_lottery<R: Read>(reader: R) -> Result<Vec<LotteryRecord>, LinkageError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    check_header(rdr.headers()?, &LOTTERY_HEADER)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        let person_id = row[0].trim().to_string();
        if person_id.is_empty() {
            return Err(LinkageError::Record {
                line,
                message: "empty person_id".into(),
            });
        }
        let lottery_year = parse_year(&row[1], "lottery_year", line)?;
        let lottery_season: Season = row[2]
            .parse()
            .map_err(|message| LinkageError::Record { line, message })?;
        let predraw_won = parse_flag(&row[3], "predraw_won", line)?;
        if !seen.insert((person_id.clone(), lottery_year, lottery_season)) {
            return Err(LinkageError::Duplicate {
                line,
                person_id,
                what: format!(
                    "application to the {lottery_year} {} lottery",
                    lottery_season.as_str()
                ),
            });
        }
        out.push(LotteryRecord {
            person_id,
            lottery_year,
            lottery_season,
            predraw_won,
            demographics: parse_demographics(&row[4], &row[5], &row[6]),
        });
    }
    Ok(out)
}

pub fn read_employment<R: Read>(reader: R) -> Result<Vec<EmploymentRecord>, LinkageError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    check_header(rdr.headers()?, &EMPLOYMENT_HEADER)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = line_of(&row);
        let person_id = row[0].trim().to_string();
        if person_id.is_empty() {
            return Err(LinkageError::Record {
                line,
                message: "empty person_id".into(),
            });
        }
        let year = parse_year(&row[1], "year", line)?;
        let employed = parse_flag(&row[2], "employed", line)?;
        let activity_level: f64 = row[3].trim().parse().map_err(|_| LinkageError::Record {
            line,
            message: format!("malformed activity_level `{}`", &row[3]),
        })?;
        if !(0.0..=100.0).contains(&activity_level) {
            return Err(LinkageError::Record {
                line,
                message: format!("activity_level {activity_level} outside [0, 100]"),
            });
        }
        if !employed && activity_level != 0.0 {
            return Err(LinkageError::Record {
                line,
                message: format!("activity_level {activity_level} for a non-employed person-year"),
            });
        }
        let resides_in_li = parse_flag(&row[4], "resides_in_li", line)?;
        if !seen.insert((person_id.clone(), year)) {
            return Err(LinkageError::Duplicate {
                line,
                person_id,
                what: format!("employment record for {year}"),
            });
        }
        out.push(EmploymentRecord {
            person_id,
            year,
            employed,
            activity_level,
            resides_in_li,
            demographics: parse_demographics(&row[5], &row[6], &row[7]),
        });
    }
    Ok(out)
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn demographic_cells(d: &Demographics) -> [String; 3] {
    [
        d.birth_year.map(|y| y.to_string()).unwrap_or_default(),
        d.nationality
            .map(|n| n.code().to_string())
            .unwrap_or_default(),
        d.gender.map(|g| g.as_str().to_string()).unwrap_or_default(),
    ]
}

pub fn write_lottery<W: Write>(records: &[LotteryRecord], writer: W) -> Result<(), LinkageError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(LOTTERY_HEADER)?;
    for r in records {
        let [birth, nat, gender] = demographic_cells(&r.demographics);
        w.write_record([
            r.person_id.as_str(),
            &r.lottery_year.to_string(),
            r.lottery_season.as_str(),
            flag(r.predraw_won),
            &birth,
            &nat,
            &gender,
        ])?;
    }
    w.flush().map_err(|source| LinkageError::Io {
        path: "<lottery writer>".into(),
        source,
    })
}

pub fn write_employment<W: Write>(
    records: &[EmploymentRecord],
    writer: W,
) -> Result<(), LinkageError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EMPLOYMENT_HEADER)?;
    for r in records {
        let [birth, nat, gender] = demographic_cells(&r.demographics);
        w.write_record([
            r.person_id.as_str(),
            &r.year.to_string(),
            flag(r.employed),
            &r.activity_level.to_string(),
            flag(r.resides_in_li),
            &birth,
            &nat,
            &gender,
        ])?;
    }
    w.flush().map_err(|source| LinkageError::Io {
        path: "<employment writer>".into(),
        source,
    })
}
