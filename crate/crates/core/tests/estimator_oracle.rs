//! IPW estimator checked against closed-form oracles and algebraic identities.

mod common;

use lottery_iv::estimator::{complier_y0_mean, ipw_late, trim, IpwRow};
use lottery_iv::{run_pipeline, OutcomeKind, PipelineConfig, TrimRule, Weighting};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn row(y: f64, d: bool, z: bool, pscore: f64) -> IpwRow {
    IpwRow { y, d, z, pscore }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

/// Eight rows whose estimates were worked out with exact fractions.
fn hand_rows() -> Vec<IpwRow> {
    vec![
        row(3.0, true, true, 0.5),
        row(1.0, false, true, 0.5),
        row(2.0, false, true, 0.25),
        row(5.0, true, true, 0.25),
        row(4.0, false, false, 0.5),
        row(0.0, false, false, 0.5),
        row(2.0, false, false, 0.25),
        row(6.0, false, false, 0.25),
    ]
}

#[test]
fn hand_computed_normalized_estimates() {
    // winner weights 2,2,4,4 (sum 12); loser weights 2,2,4/3,4/3 (sum 20/3)
    // ITT = 36/12 - 56/20 = 1/5, first stage = 6/12 = 1/2
    let e = ipw_late(&hand_rows(), Weighting::Normalized).unwrap();
    assert!(close(e.itt, 0.2, 1e-15));
    assert!(close(e.first_stage, 0.5, 1e-15));
    assert!(close(e.late, 0.4, 1e-15));
    // contrast of Y(1-D) = 10/12 - 56/20 = -59/30, of (1-D) = 1/2 - 1 = -1/2
    let y0 = complier_y0_mean(&hand_rows(), Weighting::Normalized).unwrap();
    assert!(close(y0, 59.0 / 15.0, 1e-15), "{y0}");
}

#[test]
fn hand_computed_unnormalized_estimates() {
    // signed weights 2,2,4,4,-2,-2,-4/3,-4/3 over n = 8
    // ITT = (52/3)/8 = 13/6, first stage = 6/8 = 3/4
    let e = ipw_late(&hand_rows(), Weighting::Unnormalized).unwrap();
    assert!(close(e.itt, 13.0 / 6.0, 1e-15));
    assert!(close(e.first_stage, 0.75, 1e-15));
    assert!(close(e.late, 26.0 / 9.0, 1e-15));
    // sum Y(1-D)W = -26/3, sum (1-D)W = -2/3
    let y0 = complier_y0_mean(&hand_rows(), Weighting::Unnormalized).unwrap();
    assert!(close(y0, 13.0, 1e-15), "{y0}");
}

/// Ratio of mean differences, computed without weights.
fn wald(rows: &[IpwRow]) -> f64 {
    let mean = |z: bool, f: &dyn Fn(&IpwRow) -> f64| {
        let g: Vec<f64> = rows.iter().filter(|r| r.z == z).map(f).collect();
        common::mean(&g)
    };
    let y = |r: &IpwRow| r.y;
    let d = |r: &IpwRow| f64::from(u8::from(r.d));
    (mean(true, &y) - mean(false, &y)) / (mean(true, &d) - mean(false, &d))
}

#[test]
fn constant_pscore_equals_wald_ratio() {
    let sample = common::default_draw(3);
    let n_rows = sample.n_rows() as f64;
    let winner_rows: usize = sample
        .participants
        .iter()
        .filter(|p| p.z)
        .map(|p| p.outcomes.len())
        .sum();
    let share = winner_rows as f64 / n_rows;
    for outcome in OutcomeKind::ALL {
        let rows: Vec<IpwRow> = sample
            .participants
            .iter()
            .flat_map(|p| p.outcomes.iter().map(move |o| (p, o)))
            .map(|(p, o)| row(outcome.value(o), p.d, p.z, share))
            .collect();
        let oracle = wald(&rows);
        for weighting in [Weighting::Normalized, Weighting::Unnormalized] {
            let e = ipw_late(&rows, weighting).unwrap();
            assert!(
                close(e.late, oracle, 1e-12),
                "{outcome:?} {weighting:?}: {} vs {oracle}",
                e.late
            );
        }
    }
}

#[test]
fn saturated_pooled_late_is_weighted_average_of_yearly_wald_ratios() {
    for seed in [1, 2, 3, 4, 5, 19] {
        let sample = common::default_draw(seed);
        for weighting in [Weighting::Unnormalized, Weighting::Normalized] {
            let cfg = PipelineConfig {
                weighting,
                ..PipelineConfig::default()
            };
            let out = run_pipeline(&sample, &cfg).unwrap();
            for e in &out.pooled {
                let oracle = common::saturated_oracle(&sample, e.outcome, (0.05, 0.95));
                assert!(
                    (e.late - oracle).abs() <= 1e-10,
                    "seed {seed} {:?} {weighting:?}: {} vs {oracle}",
                    e.outcome,
                    e.late
                );
            }
        }
    }
}

#[test]
fn one_sided_first_stage_is_weighted_treatment_share_among_winners() {
    let sample = common::default_draw(8);
    assert!(sample.participants.iter().all(|p| !p.d || p.z));
    let out = run_pipeline(&sample, &PipelineConfig::default()).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    // row by row, in sample order
    for (p, ps) in sample.participants.iter().zip(&out.pscores) {
        if p.z {
            for _ in &p.outcomes {
                num += f64::from(u8::from(p.d)) / ps;
                den += 1.0 / ps;
            }
        }
    }
    for e in &out.pooled {
        let share = num / den;
        assert!(
            (e.first_stage - share).abs() <= 2.0 * f64::EPSILON * share,
            "{} vs {share}",
            e.first_stage
        );
    }
}

fn arb_rows() -> impl Strategy<Value = Vec<IpwRow>> {
    prop::collection::vec(
        (-5.0f64..5.0, any::<bool>(), any::<bool>(), 0.05f64..0.95)
            .prop_map(|(y, d, z, p)| row(y, d, z, p)),
        8..80,
    )
    .prop_filter("both instrument arms", |rows| {
        rows.iter().any(|r| r.z) && rows.iter().any(|r| !r.z)
    })
}

fn arb_weighting() -> impl Strategy<Value = Weighting> {
    prop_oneof![Just(Weighting::Normalized), Just(Weighting::Unnormalized)]
}

proptest! {
    #[test]
    fn late_times_first_stage_is_itt(rows in arb_rows(), weighting in arb_weighting()) {
        if let Ok(e) = ipw_late(&rows, weighting) {
            prop_assert!((e.late * e.first_stage - e.itt).abs() <= 4.0 * f64::EPSILON * e.itt.abs().max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn power_of_two_scaling_is_exact(
        rows in arb_rows(),
        weighting in arb_weighting(),
        c in prop_oneof![Just(2.0f64), Just(0.25), Just(-8.0)],
    ) {
        if let Ok(base) = ipw_late(&rows, weighting) {
            let scaled: Vec<IpwRow> = rows.iter().map(|r| IpwRow { y: c * r.y, ..*r }).collect();
            let e = ipw_late(&scaled, weighting).unwrap();
            prop_assert_eq!(e.late, c * base.late);
            prop_assert_eq!(e.itt, c * base.itt);
            prop_assert_eq!(e.first_stage, base.first_stage);
            if let Ok(y0) = complier_y0_mean(&rows, weighting) {
                prop_assert_eq!(complier_y0_mean(&scaled, weighting).unwrap(), c * y0);
            }
        }
    }

    #[test]
    fn general_scaling_is_equivariant(rows in arb_rows(), weighting in arb_weighting(), c in -10.0f64..10.0) {
        if let Ok(base) = ipw_late(&rows, weighting) {
            prop_assume!(base.first_stage.abs() > 1e-3);
            let scaled: Vec<IpwRow> = rows.iter().map(|r| IpwRow { y: c * r.y, ..*r }).collect();
            let e = ipw_late(&scaled, weighting).unwrap();
            prop_assert!((e.late - c * base.late).abs() <= 1e-12 * (1.0 + (c * base.late).abs()));
        }
    }

    #[test]
    fn normalized_late_ignores_outcome_shifts(rows in arb_rows(), a in -100.0f64..100.0) {
        if let Ok(base) = ipw_late(&rows, Weighting::Normalized) {
            prop_assume!(base.first_stage.abs() > 1e-2);
            let shifted: Vec<IpwRow> = rows.iter().map(|r| IpwRow { y: r.y + a, ..*r }).collect();
            let e = ipw_late(&shifted, Weighting::Normalized).unwrap();
            prop_assert!((e.late - base.late).abs() <= 1e-9 * (1.0 + base.late.abs()));
        }
    }

    #[test]
    fn row_order_does_not_matter(rows in arb_rows(), weighting in arb_weighting(), seed in any::<u64>()) {
        if let Ok(base) = ipw_late(&rows, weighting) {
            prop_assume!(base.first_stage.abs() > 1e-3);
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let e = ipw_late(&shuffled, weighting).unwrap();
            prop_assert!((e.late - base.late).abs() <= 1e-10 * (1.0 + base.late.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wider_trimming_bounds_never_trim_more(
        seed in any::<u64>(),
        lo in 0.0f64..0.3,
        hi in 0.7f64..1.0,
        widen_lo in 0.0f64..1.0,
        widen_hi in 0.0f64..1.0,
    ) {
        let sample = sample_for_trimming();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pscores: Vec<f64> = (0..sample.len())
            .map(|_| rand::Rng::random_range(&mut rng, 0.001..0.999))
            .collect();
        let narrow = trim(sample, &pscores, TrimRule::new(lo, hi).unwrap());
        let wide = trim(sample, &pscores, TrimRule::new(lo * widen_lo, hi + (1.0 - hi) * widen_hi).unwrap());
        if let Ok(narrow) = narrow {
            let wide = wide.unwrap();
            prop_assert!(wide.n_trimmed_participants <= narrow.n_trimmed_participants);
            prop_assert!(wide.n_trimmed_rows <= narrow.n_trimmed_rows);
            prop_assert_eq!(wide.n_kept_rows + wide.n_trimmed_rows, sample.n_rows());
            for (w, n) in wide.kept.iter().zip(&narrow.kept) {
                prop_assert!(*w || !*n);
            }
        }
    }
}

fn sample_for_trimming() -> &'static lottery_iv::EvaluationSample {
    static SAMPLE: std::sync::OnceLock<lottery_iv::EvaluationSample> = std::sync::OnceLock::new();
    SAMPLE.get_or_init(|| common::default_draw(101))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn cumulative_outcomes_are_running_sums(seed in any::<u64>()) {
        let sample = common::default_draw(seed);
        for p in &sample.participants {
            let mut res = 0;
            let mut emp = 0;
            for (i, o) in p.outcomes.iter().enumerate() {
                prop_assert_eq!(o.period as usize, i + 2);
                res += u32::from(o.residing);
                emp += u32::from(o.employed);
                prop_assert_eq!(o.years_residing, res);
                prop_assert_eq!(o.years_employed, emp);
            }
        }
    }
}
