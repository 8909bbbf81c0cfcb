use std::fmt::Write;

use super::{Inference, Report};
use crate::estimator::{OutcomeKind, Subgroup};
use crate::propensity::CovariateMode;

const LABEL_WIDTH: usize = 26;
const COL_WIDTH: usize = 11;

/// Two decimals, without a negative zero.
pub(crate) fn fixed2(x: f64) -> String {
    if x.is_nan() {
        return "n/a".into();
    }
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Integer with thousands separators.
pub(crate) fn count(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn ordinal(k: usize) -> String {
    match k {
        1 => "first".into(),
        2 => "second".into(),
        3 => "third".into(),
        k => format!("{k}th"),
    }
}

fn header_lines(outcome: OutcomeKind) -> (&'static str, &'static str) {
    match outcome {
        OutcomeKind::ResidingBinary => ("Residing", "(binary)"),
        OutcomeKind::EmployedBinary => ("Employed", "(binary)"),
        OutcomeKind::ActivityLevelPct => ("Activity", "level (%)"),
        OutcomeKind::YearsResiding => ("Years", "residing"),
        OutcomeKind::YearsEmployed => ("Years", "employed"),
    }
}

fn cells<F: Fn(&Inference) -> Option<f64>>(
    report: &Report,
    pick: fn(&super::PooledEntry) -> &Inference,
    f: F,
) -> String {
    report
        .pooled
        .iter()
        .map(|e| {
            let v = f(pick(e)).map(fixed2).unwrap_or_else(|| "n/a".into());
            format!("{v:>COL_WIDTH$}")
        })
        .collect()
}

fn panel(
    out: &mut String,
    report: &Report,
    title: &str,
    pick: fn(&super::PooledEntry) -> &Inference,
) {
    let _ = writeln!(out, "{title}");
    let rows: [(&str, fn(&Inference) -> Option<f64>); 3] = [
        ("Effect", |i| Some(i.estimate)),
        ("Standard error", |i| i.se),
        ("p-value", |i| i.p_value),
    ];
    for (label, f) in rows {
        let label = format!("  {label}");
        let _ = writeln!(out, "{label:<LABEL_WIDTH$}{}", cells(report, pick, f));
    }
}

/// Aligned plain-text tables: pooled effects in three panels, then the
/// winner/loser balance comparison.
pub fn render_tables(report: &Report) -> String {
    let mut out = String::new();
    let r = &report.run;
    let group = match r.subgroup {
        Subgroup::All => "all participants",
        Subgroup::Commuter => "commuters at baseline",
        Subgroup::NonCommuter => "non-commuters at baseline",
    };
    let covariates = match r.covariates {
        CovariateMode::YearDummiesOnly => "lottery-year dummies",
        CovariateMode::YearPlusDemographics => "lottery-year dummies, age, gender, nationality",
    };
    let _ = writeln!(out, "Effects pooled over outcome periods");
    let _ = writeln!(
        out,
        "Sample: {} lottery participation, {group}",
        ordinal(r.participation)
    );
    let _ = writeln!(out, "Propensity covariates: {covariates}");
    if r.replications > 0 {
        let _ = writeln!(
            out,
            "Inference: cluster bootstrap over persons, {} replications",
            count(r.replications)
        );
    } else {
        let _ = writeln!(out, "Inference: none");
    }
    out.push('\n');

    let (mut top, mut bottom) = (String::new(), String::new());
    for e in &report.pooled {
        let (a, b) = header_lines(e.outcome);
        let _ = write!(top, "{a:>COL_WIDTH$}");
        let _ = write!(bottom, "{b:>COL_WIDTH$}");
    }
    let _ = writeln!(out, "{:LABEL_WIDTH$}{top}", "");
    let _ = writeln!(out, "{:LABEL_WIDTH$}{bottom}", "");
    panel(&mut out, report, "LATE", |e| &e.late);
    panel(&mut out, report, "First stage", |e| &e.first_stage);
    panel(&mut out, report, "ITT", |e| &e.itt);
    let _ = writeln!(
        out,
        "{:<LABEL_WIDTH$}{:>COL_WIDTH$}",
        "Number of observations",
        count(report.trimming.rows_used)
    );
    let _ = writeln!(
        out,
        "{:<LABEL_WIDTH$}{:>COL_WIDTH$}",
        "Trimmed observations",
        count(report.trimming.rows_trimmed)
    );

    out.push('\n');
    let _ = writeln!(out, "Winners and losers at the anchoring participation");
    let _ = writeln!(
        out,
        "{:<24}{:>9}{:>9}{:>9}{:>9}{:>11}{:>9}{:>9}{:>8}",
        "", "Winners", "", "Losers", "", "", "", "", ""
    );
    let _ = writeln!(
        out,
        "{:<24}{:>9}{:>9}{:>9}{:>9}{:>11}{:>9}{:>9}{:>8}",
        "Variable", "Mean", "SD", "Mean", "SD", "Diff.", "t-value", "p-value", "n"
    );
    for row in &report.balance.rows {
        let opt = |v: Option<f64>| v.map(fixed2).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            out,
            "{:<24}{:>9}{:>9}{:>9}{:>9}{:>11}{:>9}{:>9}{:>8}",
            row.variable,
            fixed2(row.mean_winners),
            fixed2(row.sd_winners),
            fixed2(row.mean_losers),
            fixed2(row.sd_losers),
            fixed2(row.difference),
            opt(row.t_value),
            opt(row.p_value),
            count(row.n),
        );
    }
    out
}

fn csv_f64(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => String::new(),
    }
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Per-period series: LATE with pointwise bootstrap interval and the
/// complier mean under non-treatment.
pub fn render_periods_csv(report: &Report) -> String {
    let mut rows = vec![[
        "outcome",
        "period",
        "late",
        "ci_lo",
        "ci_hi",
        "complier_y0",
        "n",
        "n_trimmed",
    ]
    .map(String::from)
    .to_vec()];
    for e in &report.periods {
        rows.push(vec![
            e.outcome.key().to_string(),
            e.period.to_string(),
            csv_f64(Some(e.late.estimate)),
            csv_f64(e.late.ci.map(|c| c.0)),
            csv_f64(e.late.ci.map(|c| c.1)),
            csv_f64(Some(e.complier_y0_mean)),
            e.n_used.to_string(),
            e.n_trimmed.to_string(),
        ]);
    }
    csv_string(rows)
}

pub fn render_balance_csv(report: &Report) -> String {
    let mut rows = vec![[
        "variable",
        "mean_winners",
        "sd_winners",
        "mean_losers",
        "sd_losers",
        "difference",
        "t_value",
        "p_value",
        "n",
    ]
    .map(String::from)
    .to_vec()];
    for r in &report.balance.rows {
        rows.push(vec![
            r.variable.clone(),
            csv_f64(Some(r.mean_winners)),
            csv_f64(Some(r.sd_winners)),
            csv_f64(Some(r.mean_losers)),
            csv_f64(Some(r.sd_losers)),
            csv_f64(Some(r.difference)),
            csv_f64(r.t_value),
            csv_f64(r.p_value),
            r.n.to_string(),
        ]);
    }
    csv_string(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_formats() {
        assert_eq!(count(0), "0");
        assert_eq!(count(999), "999");
        assert_eq!(count(20009), "20,009");
        assert_eq!(count(1234567), "1,234,567");
        assert_eq!(fixed2(-0.001), "0.00");
        assert_eq!(fixed2(0.715), "0.71");
        assert_eq!(fixed2(-1.5), "-1.50");
    }
}
