use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::linkage::{EvaluationSample, Gender, Nationality, Participant};

/// Welch two-sample comparison of one variable across winners and losers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub variable: String,
    pub mean_winners: f64,
    pub sd_winners: f64,
    pub mean_losers: f64,
    pub sd_losers: f64,
    pub difference: f64,
    /// `None` when the statistic is undefined (zero variance in both groups
    /// or fewer than two observations in a group).
    pub t_value: Option<f64>,
    pub p_value: Option<f64>,
    pub df: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub rows: Vec<BalanceRow>,
}

impl BalanceTable {
    pub fn get(&self, variable: &str) -> Option<&BalanceRow> {
        self.rows.iter().find(|r| r.variable == variable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        f64::NAN
    };
    (mean, var)
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of
/// freedom and a two-sided Student-t p-value.
pub fn welch_t(a: &[f64], b: &[f64]) -> Option<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let sa = va / a.len() as f64;
    let sb = vb / b.len() as f64;
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return None;
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Some(WelchTest { t, df, p })
}

fn row(variable: impl Into<String>, winners: &[f64], losers: &[f64]) -> BalanceRow {
    let stats = |x: &[f64]| {
        if x.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (m, v) = mean_var(x);
            (m, if v.is_nan() { 0.0 } else { v.sqrt() })
        }
    };
    let (m1, s1) = stats(winners);
    let (m0, s0) = stats(losers);
    let test = welch_t(winners, losers);
    BalanceRow {
        variable: variable.into(),
        mean_winners: m1,
        sd_winners: s1,
        mean_losers: m0,
        sd_losers: s0,
        difference: m1 - m0,
        t_value: test.map(|w| w.t),
        p_value: test.map(|w| w.p),
        df: test.map(|w| w.df),
        n: winners.len() + losers.len(),
    }
}

fn split<F>(sample: &EvaluationSample, value: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&Participant) -> Option<f64>,
{
    let mut winners = Vec::new();
    let mut losers = Vec::new();
    for p in &sample.participants {
        if let Some(v) = value(p) {
            if p.z {
                winners.push(v);
            } else {
                losers.push(v);
            }
        }
    }
    (winners, losers)
}

fn dummy(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Descriptive comparison of winners and losers.
///
/// Female and the missing-value dummies use every participant (a missing
/// gender counts as not female); nationality shares and age use participants
/// with the value observed. Year dummies cover every participation year in
/// the sample.
pub fn balance_table(sample: &EvaluationSample) -> BalanceTable {
    let mut rows = Vec::new();
    let mut push = |name: String, f: &dyn Fn(&Participant) -> Option<f64>| {
        let (w, l) = split(sample, f);
        rows.push(row(name, &w, &l));
    };

    push("Female".into(), &|p| {
        Some(dummy(p.demographics.gender == Some(Gender::Female)))
    });
    push("Nationality missing".into(), &|p| {
        Some(dummy(p.demographics.nationality_missing()))
    });
    for nat in Nationality::ALL {
        push(nat.name().into(), &move |p| {
            p.demographics.nationality.map(|n| dummy(n == nat))
        });
    }
    push("Age missing".into(), &|p| {
        Some(dummy(p.demographics.birth_year_missing()))
    });
    push("Age".into(), &|p| p.age().map(f64::from));
    let years: BTreeSet<i32> = sample.participants.iter().map(|p| p.t0).collect();
    for y in years {
        push(format!("Year {y}"), &move |p| Some(dummy(p.t0 == y)));
    }
    BalanceTable { rows }
}
