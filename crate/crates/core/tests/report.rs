//! Report assembly, output files and the command-line interface.

use std::fs;
use std::path::Path;
use std::process::Command;

use lottery_iv::dgp::DgpConfig;
use lottery_iv::report::{balance_table, welch_t};
use lottery_iv::report::{run, run_analysis, InputSource, RunConfig, Stage, REPORT_FILES};
use lottery_iv::{BootstrapConfig, OutcomeKind, Subgroup};

fn dgp_run(cfg: DgpConfig, seed: u64, out: &Path) -> RunConfig {
    let mut run = RunConfig::new(
        InputSource::Dgp {
            config: Box::new(cfg),
            seed,
        },
        out,
    );
    run.bootstrap = BootstrapConfig {
        replications: 49,
        seed,
        ..BootstrapConfig::default()
    };
    run
}

/// Two-sided Student-t tail by Simpson's rule on the density.
fn student_t_p(t: f64, df: f64) -> f64 {
    let c = (libm::lgamma((df + 1.0) / 2.0) - libm::lgamma(df / 2.0)).exp()
        / (df * std::f64::consts::PI).sqrt();
    let f = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    1.0 - 2.0 * s * h / 3.0
}

#[test]
fn welch_test_matches_hand_computation() {
    let a = [1.0, 2.0, 3.0];
    let b = [2.0, 4.0, 6.0];
    // means 2 and 4, variances 1 and 4: se^2 = 1/3 + 4/3 = 5/3,
    // df = (25/9) / ((1/9)/2 + (16/9)/2) = 50/17
    let w = welch_t(&a, &b).unwrap();
    let t = -2.0 / (5.0f64 / 3.0).sqrt();
    let df = 50.0 / 17.0;
    assert!((w.t - t).abs() <= 1e-12);
    assert!((w.df - df).abs() <= 1e-12);
    let p = student_t_p(t, df);
    assert!((w.p - p).abs() <= 1e-9, "{} vs {p}", w.p);
}

#[test]
fn default_draws_look_like_a_fair_lottery() {
    // missing flags are left out: registry rows backfill them, and winners
    // who move have more registry rows
    let demographic = [
        "Female",
        "Austria",
        "Germany",
        "Italy",
        "Switzerland",
        "Others",
        "Age",
    ];
    let mut tests = 0;
    let mut rejections = 0;
    for seed in 0..10 {
        let data = lottery_iv::dgp::generate(&DgpConfig::default(), seed).unwrap();
        let panel = lottery_iv::link_records(&data.lottery, &data.employment);
        let sample = lottery_iv::build_evaluation_sample(
            &panel,
            lottery_iv::linkage::SampleWindow::default(),
        )
        .unwrap();
        let table = balance_table(&sample);
        for name in demographic {
            let row = table.get(name).unwrap();
            if let Some(t) = row.t_value {
                tests += 1;
                rejections += usize::from(t.abs() > 1.96);
            }
        }
    }
    assert!(tests >= 60);
    let share = rejections as f64 / tests as f64;
    assert!(
        share <= 0.10,
        "{rejections} of {tests} demographic rows reject"
    );
}

#[test]
fn report_files_are_reproducible_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let report = run(&dgp_run(DgpConfig::paper_shaped(), 7, &a)).unwrap();
    run(&dgp_run(DgpConfig::paper_shaped(), 7, &b)).unwrap();
    for name in REPORT_FILES {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between reruns"
        );
    }

    let json: lottery_iv::report::Report =
        serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(json, report);
    assert_eq!(report.sample.n_participants, 3145);
    assert_eq!(report.sample.n_rows, 20009);
    assert_eq!(report.trimming.rows_trimmed, 0);
    assert!(report.truth.is_some());

    let tables = fs::read_to_string(a.join("tables.txt")).unwrap();
    let effect_line = tables.lines().skip_while(|l| *l != "LATE").nth(1).unwrap();
    let cells: Vec<&str> = effect_line.split_whitespace().skip(1).collect();
    assert_eq!(cells.len(), OutcomeKind::ALL.len());
    for (cell, entry) in cells.iter().zip(&report.pooled) {
        assert_eq!(*cell, format!("{:.2}", entry.late.estimate));
    }
    assert!(tables.contains("Number of observations"));
    assert!(tables.contains("20,009"));

    let periods = fs::read_to_string(a.join("periods.csv")).unwrap();
    assert_eq!(periods.lines().count(), 1 + report.periods.len());
    let balance = fs::read_to_string(a.join("balance.csv")).unwrap();
    assert_eq!(balance.lines().count(), 1 + report.balance.rows.len());
}

#[test]
fn later_participation_anchors_a_smaller_sample() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = dgp_run(DgpConfig::paper_shaped(), 7, dir.path());
    cfg.bootstrap.replications = 0;
    let first = run_analysis(&cfg).unwrap();
    cfg.participation = 2;
    let second = run_analysis(&cfg).unwrap();
    assert!(second.sample.n_participants > 0);
    assert!(second.sample.n_participants < first.sample.n_participants);
    assert_eq!(second.run.participation, 2);
    assert!(second.pooled.iter().all(|e| e.late.se.is_none()));
}

#[test]
fn empty_subgroup_names_the_failing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let dgp = DgpConfig {
        commuter_share: 0.0,
        ..DgpConfig::default()
    };
    let mut cfg = dgp_run(dgp, 1, dir.path());
    cfg.subgroup = Subgroup::Commuter;
    let err = run_analysis(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Subgroup);
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().starts_with("subgroup stage failed"));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lottery-iv"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let ok = cli()
        .args([
            "--dgp-config",
            "default",
            "--seed",
            "3",
            "--reps",
            "19",
            "--write-synthetic",
        ])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    for name in REPORT_FILES
        .iter()
        .chain(&["lottery.csv", "employment.csv"])
    {
        assert!(out.join(name).is_file(), "{name} missing");
    }

    // the synthetic files read back through the file input path
    let again = dir.path().join("again");
    let from_files = cli()
        .arg("--lottery-csv")
        .arg(out.join("lottery.csv"))
        .arg("--employment-csv")
        .arg(out.join("employment.csv"))
        .args(["--seed", "3", "--reps", "19", "--out"])
        .arg(&again)
        .output()
        .unwrap();
    assert_eq!(from_files.status.code(), Some(0));
    assert_eq!(
        fs::read(out.join("tables.txt")).unwrap(),
        fs::read(again.join("tables.txt")).unwrap()
    );

    let missing = cli()
        .args([
            "--lottery-csv",
            "/nonexistent/l.csv",
            "--employment-csv",
            "/nonexistent/e.csv",
        ])
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("input stage failed"));

    let no_input = cli()
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(no_input.status.code(), Some(1));

    let toml = dir.path().join("nocommuters.toml");
    fs::write(&toml, "commuter_share = 0.0\n").unwrap();
    let empty = cli()
        .arg("--dgp-config")
        .arg(&toml)
        .args(["--subgroup", "commuter", "--reps", "0", "--out"])
        .arg(dir.path().join("z"))
        .output()
        .unwrap();
    assert_eq!(empty.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("subgroup stage failed"));
}
