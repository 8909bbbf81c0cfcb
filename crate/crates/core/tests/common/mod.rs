#![allow(dead_code)]

//! Test-side oracles. Nothing here calls the library's numerical code.

use std::collections::BTreeMap;

use libm::erfc;
use lottery_iv::dgp::{generate, DgpConfig};
use lottery_iv::linkage::{build_evaluation_sample, link_records, EvaluationSample, SampleWindow};
use lottery_iv::propensity::{
    build_design, fit_probit, predict_pscore, probit_gradient, probit_log_likelihood,
    CovariateSpec, DesignMatrix, ProbitOptions,
};
use lottery_iv::OutcomeKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn draw(cfg: &DgpConfig, seed: u64) -> EvaluationSample {
    let data = generate(cfg, seed).expect("dgp draw");
    let panel = link_records(&data.lottery, &data.employment);
    build_evaluation_sample(&panel, SampleWindow::default()).expect("evaluation sample")
}

pub fn default_draw(seed: u64) -> EvaluationSample {
    draw(&DgpConfig::default(), seed)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn phi_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Direct sum of log Bernoulli probabilities, with `1 - Φ(η) = Φ(-η)`.
pub fn oracle_loglik(rows: &[Vec<f64>], z: &[bool], beta: &[f64]) -> f64 {
    rows.iter()
        .zip(z)
        .map(|(x, &zi)| {
            let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            if zi {
                phi_cdf(eta).ln()
            } else {
                phi_cdf(-eta).ln()
            }
        })
        .sum()
}

pub fn inverse_phi_by_bisection(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn random_design(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
) -> (Vec<String>, Vec<Vec<f64>>, Vec<bool>) {
    let labels: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
    let truth: Vec<f64> = (0..k).map(|_| rng.random_range(-0.8..0.8)).collect();
    let mut rows = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = vec![1.0];
        for j in 1..k {
            // alternate continuous and sparse dummy columns
            let v: f64 = if j % 2 == 1 {
                StandardNormal.sample(rng)
            } else {
                f64::from(u8::from(rng.random_bool(0.3)))
            };
            x.push(v);
        }
        let eta: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
        z.push(rng.random_bool(phi_cdf(eta)));
        rows.push(x);
    }
    (labels, rows, z)
}

/// Worst analytic-vs-central-difference gradient error on each of 20 random
/// designs, relative to the gradient's max norm (floored at 1), plus the
/// worst log-likelihood relative error.
pub fn gradient_errors(seed: u64) -> (Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad_errors = Vec::with_capacity(20);
    let mut ll_error: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(40..400);
        let k = rng.random_range(2..7);
        let (labels, rows, z) = random_design(&mut rng, n, k);
        let design = DesignMatrix::from_rows(labels, &rows).unwrap();
        let beta: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = probit_gradient(&design, &z, &beta);
        let h = 1e-5;
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1.0);
        let mut worst: f64 = 0.0;
        for j in 0..k {
            let mut up = beta.clone();
            let mut down = beta.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (oracle_loglik(&rows, &z, &up) - oracle_loglik(&rows, &z, &down)) / (2.0 * h);
            worst = worst.max((fd - analytic[j]).abs() / scale);
        }
        grad_errors.push(worst);
        let oracle = oracle_loglik(&rows, &z, &beta);
        let ll = probit_log_likelihood(&design, &z, &beta);
        ll_error = ll_error.max((ll - oracle).abs() / oracle.abs());
    }
    (grad_errors, ll_error)
}

/// Intercept-only fit on 350 winners out of 3,145, against Φ⁻¹ by bisection.
pub fn intercept_only_error() -> f64 {
    let n = 3145;
    let winners = 350;
    let rows = vec![vec![1.0]; n];
    let z: Vec<bool> = (0..n).map(|i| i % 9 == 0 && i / 9 < winners).collect();
    let design = DesignMatrix::from_rows(vec!["intercept".into()], &rows).unwrap();
    let fit = fit_probit(&design, &z, ProbitOptions::default()).unwrap();
    assert!(fit.converged);
    let expected = inverse_phi_by_bisection(winners as f64 / n as f64);
    (fit.coefficients[0] - expected).abs()
}

/// Largest gap between saturated fitted pscores and yearly winner shares.
pub fn saturated_pscore_error(sample: &EvaluationSample) -> f64 {
    let design = build_design(sample, &CovariateSpec::year_dummies()).unwrap();
    let z: Vec<bool> = sample.participants.iter().map(|p| p.z).collect();
    let fit = fit_probit(&design, &z, ProbitOptions::default()).unwrap();
    let pscores = predict_pscore(&fit, &design).unwrap();
    let mut cells: BTreeMap<i32, (f64, f64)> = BTreeMap::new();
    for p in &sample.participants {
        let c = cells.entry(p.t0).or_default();
        c.0 += f64::from(u8::from(p.z));
        c.1 += 1.0;
    }
    sample
        .participants
        .iter()
        .zip(&pscores)
        .map(|(p, ps)| {
            let (w, n) = cells[&p.t0];
            (ps - w / n).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Default)]
struct Cell {
    participants: f64,
    winners: f64,
    rows: f64,
    y: [(f64, f64); 2],
    d: [(f64, f64); 2],
}

/// Pooled LATE under saturated year propensities, rebuilt from per-year Wald
/// ratios weighted by outcome-row count times first stage. A year whose
/// winner share falls outside `[lo, hi]` is trimmed as a whole.
pub fn saturated_oracle(
    sample: &EvaluationSample,
    outcome: OutcomeKind,
    (lo, hi): (f64, f64),
) -> f64 {
    let mut cells: BTreeMap<i32, Cell> = BTreeMap::new();
    for p in &sample.participants {
        let c = cells.entry(p.t0).or_default();
        let arm = usize::from(p.z);
        let d = f64::from(u8::from(p.d));
        c.participants += 1.0;
        c.winners += f64::from(u8::from(p.z));
        for o in &p.outcomes {
            c.rows += 1.0;
            c.y[arm].0 += outcome.value(o);
            c.y[arm].1 += 1.0;
            c.d[arm].0 += d;
            c.d[arm].1 += 1.0;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for c in cells.values() {
        let share = c.winners / c.participants;
        if share < lo || share > hi {
            continue;
        }
        let fs = c.d[1].0 / c.d[1].1 - c.d[0].0 / c.d[0].1;
        let itt = c.y[1].0 / c.y[1].1 - c.y[0].0 / c.y[0].1;
        let weight = c.rows * fs;
        num += weight * (itt / fs);
        den += weight;
    }
    num / den
}
