//! Exit-gate checks. Each criterion prints one pass/fail line with its
//! measured values and runtime; the test fails if any line fails.
//!
//! Tolerances and budgets are pinned here on purpose: closed-form
//! agreement to 1e-6/1e-4, oracle agreement within binomial noise, and
//! pattern reproduction at desk-scale replicate counts.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;

use tubetest::covariance::{CovarianceKernel, KernelKind};
use tubetest::geometry::{
    critical_value, detect_singularities, exclusion_radius, tail_probability,
    tube_analysis, TubeConstants,
};
use tubetest::harness::{run_experiment, ExperimentSpec};
use tubetest::model::{
    DensityFamily, Domain, Estimation, MixingDistribution, NullModel, PerturbationModel,
};
use tubetest::oracle::{
    disk_ring_grid, lrt_equivalence_report, mc_null_distribution, mc_sup_tail,
};
use tubetest::score::{default_grid, fit_weights_trail, score_process, TestSpec};

fn model_for(
    family: DensityFamily,
    point: Vec<f64>,
    estimation: Estimation,
    domain: Domain,
) -> PerturbationModel {
    let mixing = MixingDistribution::single(point).unwrap();
    let null = NullModel::new(family.clone(), mixing, estimation).unwrap();
    PerturbationModel::new(null, family, domain, 0.0).unwrap()
}

fn binom_kernel(lambda: f64) -> CovarianceKernel {
    let model = model_for(
        DensityFamily::Binomial2,
        vec![lambda],
        Estimation::Fixed,
        Domain::interval(0.0, 1.0).unwrap(),
    );
    CovarianceKernel::new(&model, KernelKind::Fixed).unwrap()
}

fn disk_kernel(rho1: f64) -> CovarianceKernel {
    let model = model_for(
        DensityFamily::NormalMultivariate { dim: 2 },
        vec![0.0, 0.0],
        Estimation::Fixed,
        Domain::disk(rho1).unwrap(),
    );
    CovarianceKernel::new(&model, KernelKind::Fixed).unwrap()
}

/// Arc-angle closed form for the fixed two-trial binomial manifold.
fn arc_formula(lam: f64) -> f64 {
    ((2.0 * lam) / (1.0 + lam)).sqrt().acos()
        + ((2.0 * (1.0 - lam)) / (2.0 - lam)).sqrt().acos()
}

/// Closed-form disk volume, by high-resolution Simpson quadrature of the
/// polar integrand; independent of the library quadrature.
fn disk_closed_kappa0(rho1: f64) -> f64 {
    let integrand = |rho: f64| -> f64 {
        if rho == 0.0 {
            return 0.5_f64.sqrt();
        }
        let r2 = rho * rho;
        let em1 = r2.exp_m1();
        let num = r2 * (2.0 * r2).exp() * (em1 - r2);
        (num / (em1 * em1 * em1)).sqrt()
    };
    let n = 40_000;
    let h = rho1 / n as f64;
    let mut acc = integrand(0.0) + integrand(rho1);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * integrand(i as f64 * h);
    }
    2.0 * PI * acc * h / 3.0
}

/// Closed-form disk boundary length, outer ring plus the unit-circle
/// limit of the inner ring as its radius shrinks to zero.
fn disk_closed_ell0(rho1: f64) -> f64 {
    let r2 = rho1 * rho1;
    2.0 * PI * (1.0 + (r2 * r2.exp() / r2.exp_m1()).sqrt())
}

/// Default grid restricted to points where the normalization exists.
fn oracle_grid(kernel: &CovarianceKernel) -> Vec<Vec<f64>> {
    let singular = detect_singularities(kernel, None).unwrap();
    let mut grid = default_grid(kernel, &singular).unwrap();
    grid.retain(|p| {
        singular.iter().all(|s| {
            let d: f64 = s
                .location
                .iter()
                .zip(p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d >= exclusion_radius(kernel, s.class)
        })
    });
    grid
}

fn closed_form_constants() -> (bool, String) {
    let mut worst = 0.0_f64;
    for lam in [0.3, 0.5, 0.7] {
        let (_, constants) = tube_analysis(&binom_kernel(lam), None).unwrap();
        worst = worst.max((constants.kappa0 - arc_formula(lam)).abs());
    }
    (worst <= 1e-6, format!("max |kappa0 - arcs| = {worst:.2e}, tolerance 1e-6"))
}

fn bivariate_geometry() -> (bool, String) {
    let mut worst = 0.0_f64;
    let mut eulers_ok = true;
    for rho1 in [1.0, 2.0] {
        let (summary, constants) = tube_analysis(&disk_kernel(rho1), None).unwrap();
        worst = worst.max((constants.kappa0 - disk_closed_kappa0(rho1)).abs());
        worst = worst.max((constants.ell0 - disk_closed_ell0(rho1)).abs());
        eulers_ok &= summary.euler == 0 && summary.holes == 1;
    }
    (
        worst <= 1e-4 && eulers_ok,
        format!("max |constant - closed form| = {worst:.2e}, tolerance 1e-4, euler 0 both radii"),
    )
}

fn tube_versus_field_oracle() -> (bool, String) {
    let replicates = 100_000;
    let mut details = Vec::new();
    let mut pass = true;
    let normal_model = model_for(
        DensityFamily::NormalUnivariate,
        vec![0.0],
        Estimation::Fixed,
        Domain::interval(-3.0, 3.0).unwrap(),
    );
    let cases: Vec<(&str, CovarianceKernel, Option<Vec<Vec<f64>>>, u64)> = vec![
        ("binomial", binom_kernel(0.5), None, 1001),
        (
            "normal",
            CovarianceKernel::new(&normal_model, KernelKind::Fixed).unwrap(),
            None,
            1002,
        ),
        ("disk", disk_kernel(2.0), Some(disk_ring_grid(2.0, 0.2).unwrap()), 1003),
    ];
    for (name, kernel, grid, seed) in cases {
        let (_, constants) = tube_analysis(&kernel, None).unwrap();
        let c = critical_value(&constants, 0.05).unwrap();
        let grid = grid.unwrap_or_else(|| oracle_grid(&kernel));
        let curve = mc_sup_tail(&kernel, &grid, &[c], replicates, seed).unwrap();
        let diff = (curve.exceedance[0] - 0.05).abs();
        let tol = (4.0 * curve.std_errors[0]).max(0.01);
        pass &= diff <= tol;
        details.push(format!("{name} |tube - mc| = {diff:.4} (tol {tol:.4})"));
    }
    (pass, details.join("; "))
}

fn chi_bar_null() -> (bool, String) {
    let spec = TestSpec {
        family: DensityFamily::Binomial2,
        mixing: MixingDistribution::single(vec![0.5]).unwrap(),
        estimation: Estimation::Full,
        domain: Domain::interval(0.0, 1.0).unwrap(),
    };
    let dist = mc_null_distribution(&spec, 500, 2000, &[1.6449], 77).unwrap();
    let rate = dist.rates[0];
    let pass = (0.03..=0.07).contains(&rate) && dist.failures <= 20;
    (
        pass,
        format!(
            "P(T >= 1.6449) = {rate:.4} over 2000 replicates (want 0.05 +/- 0.02), {} failures",
            dist.failures
        ),
    )
}

fn table_pattern_at_desk_scale() -> (bool, String) {
    let cell = |model: u8, eta: f64| ExperimentSpec {
        model,
        eta,
        n: 200,
        replicates: 300,
        alpha: 0.05,
        seed: 505,
    };
    let m1_null = run_experiment(&cell(1, 0.0)).unwrap();
    let m1_alt = run_experiment(&cell(1, 0.2)).unwrap();
    let m3_alt = run_experiment(&cell(3, 0.2)).unwrap();
    let pass = (0.03..=0.13).contains(&m1_null.rate)
        && m1_alt.rate >= 0.90
        && m3_alt.rate < m1_alt.rate;
    (
        pass,
        format!(
            "model 1 size {:.3} (want [0.03, 0.13]); model 1 power {:.3} (want >= 0.90); \
             model 3 power {:.3} (want < model 1)",
            m1_null.rate, m1_alt.rate, m3_alt.rate
        ),
    )
}

fn likelihood_score_equivalence() -> (bool, String) {
    let spec = TestSpec {
        family: DensityFamily::Binomial2,
        mixing: MixingDistribution::single(vec![0.5]).unwrap(),
        estimation: Estimation::Fixed,
        domain: Domain::interval(0.1, 0.9).unwrap(),
    };
    let report = lrt_equivalence_report(&spec, &[200, 500, 2000], 50, 4242).unwrap();
    let m = &report.median_discrepancy;
    let pass = m.windows(2).all(|w| w[1] < w[0]);
    (
        pass,
        format!("median sup gaps {:.4} -> {:.4} -> {:.4} (want strictly decreasing)", m[0], m[1], m[2]),
    )
}

fn property_spot_checks() -> (bool, String) {
    let mut failed = Vec::new();

    // Kernel symmetry, Cauchy-Schwarz, and positive semidefiniteness.
    let kernel = binom_kernel(0.4);
    let pts = [0.1, 0.2, 0.3, 0.6, 0.8];
    let mut kernel_ok = true;
    for &a in &pts {
        for &b in &pts {
            let cab = kernel.cov(&[a], &[b]).unwrap();
            let cba = kernel.cov(&[b], &[a]).unwrap();
            kernel_ok &= (cab - cba).abs() <= 1e-11 * (1.0 + cab.abs());
            let va = kernel.variance(&[a]).unwrap();
            let vb = kernel.variance(&[b]).unwrap();
            kernel_ok &= cab * cab <= va * vb + 1e-10;
        }
    }
    let m = pts.len();
    let rho = DMatrix::from_fn(m, m, |i, j| kernel.corr(&[pts[i]], &[pts[j]]).unwrap());
    let min_eig =
        rho.symmetric_eigenvalues().iter().fold(f64::INFINITY, |acc, &e| acc.min(e));
    kernel_ok &= min_eig > -1e-8;
    if !kernel_ok {
        failed.push("kernel laws");
    }

    // Analytic gradients against central finite differences.
    let mut grad_ok = true;
    for (family, theta, x) in [
        (DensityFamily::Binomial2, 0.37, 1.0),
        (DensityFamily::NormalUnivariate, 0.4, 1.3),
    ] {
        let h = 1e-5;
        let grad = family.grad_log(&[theta], &[x]).unwrap()[0];
        let up = family.density(&[theta + h], &[x]).unwrap().ln();
        let dn = family.density(&[theta - h], &[x]).unwrap().ln();
        grad_ok &= (grad - (up - dn) / (2.0 * h)).abs() <= 1e-6 * grad.abs().max(1.0);
    }
    if !grad_ok {
        failed.push("gradient vs finite differences");
    }

    // EM sweeps never lower the loglikelihood.
    let data = tubetest::model::Dataset::univariate(vec![
        0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 0.0, 1.0, 2.0,
    ])
    .unwrap();
    let (_, trail) =
        fit_weights_trail(&data, &DensityFamily::Binomial2, &[vec![0.3], vec![0.7]]).unwrap();
    if !trail.windows(2).all(|w| w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs())) {
        failed.push("em monotonicity");
    }

    // The normalized field flips sign across the fixed null parameter.
    let flip_kernel = binom_kernel(0.5);
    let flip_model = model_for(
        DensityFamily::Binomial2,
        vec![0.5],
        Estimation::Fixed,
        Domain::interval(0.0, 1.0).unwrap(),
    );
    let flip_data = flip_model.sample(&[0.5], 200, 8).unwrap();
    let sing = detect_singularities(&flip_kernel, None).unwrap();
    let r = exclusion_radius(&flip_kernel, sing[0].class);
    let eval = score_process(
        &flip_data,
        &flip_kernel,
        &[vec![0.5 - 1.5 * r], vec![0.5 + 1.5 * r]],
    )
    .unwrap();
    let (left, right) = (eval.normalized[0].unwrap(), eval.normalized[1].unwrap());
    if (left + right).abs() >= 0.05 * left.abs().max(right.abs()).max(0.25) {
        failed.push("flip antisymmetry");
    }

    // Tail series decreasing in the threshold; critical value inverts it.
    let constants =
        TubeConstants { dim: 1, zeta: vec![2.5, 2.0], kappa0: 2.5, ell0: 4.0, euler: 1 };
    let tails: Vec<f64> = (0..9)
        .map(|i| tail_probability(&constants, 1.5 + 0.25 * i as f64).unwrap())
        .collect();
    if !tails.windows(2).all(|w| w[1] < w[0]) {
        failed.push("tail monotonicity");
    }
    if ![0.01, 0.05, 0.1].iter().all(|&alpha| {
        let c = critical_value(&constants, alpha).unwrap();
        (tail_probability(&constants, c).unwrap() - alpha).abs() < 1e-9
    }) {
        failed.push("critical value round trip");
    }

    // Fixed seeds replay bit-for-bit.
    let d1 = flip_model.sample(&[0.5], 64, 12345).unwrap();
    let d2 = flip_model.sample(&[0.5], 64, 12345).unwrap();
    let grid = vec![vec![0.2], vec![0.35], vec![0.7]];
    let c1 = mc_sup_tail(&flip_kernel, &grid, &[1.0, 2.0], 50, 9).unwrap();
    let c2 = mc_sup_tail(&flip_kernel, &grid, &[1.0, 2.0], 50, 9).unwrap();
    if !(d1.iter_rows().eq(d2.iter_rows()) && c1.exceedance == c2.exceedance) {
        failed.push("seed determinism");
    }

    if failed.is_empty() {
        (true, "kernel laws, gradients, EM, flip, tail, round trip, determinism all hold".into())
    } else {
        (false, format!("failing: {}", failed.join(", ")))
    }
}

#[test]
fn acceptance_criteria() {
    let checks: &[(&str, f64, fn() -> (bool, String))] = &[
        ("closed-form constants", 5.0, closed_form_constants),
        ("bivariate geometry", 60.0, bivariate_geometry),
        ("tube vs field oracle", 600.0, tube_versus_field_oracle),
        ("chi-bar null calibration", 300.0, chi_bar_null),
        ("experiment table pattern", 1800.0, table_pattern_at_desk_scale),
        ("likelihood-score equivalence", 300.0, likelihood_score_equivalence),
        ("property spot checks", 60.0, property_spot_checks),
    ];
    let mut failures = Vec::new();
    for (i, (label, budget, f)) in checks.iter().enumerate() {
        let start = Instant::now();
        let (mut pass, mut detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(outcome) => outcome,
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                (false, format!("panicked: {msg}"))
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        if seconds > *budget {
            pass = false;
            detail.push_str(&format!(" [exceeded {budget:.0}s budget]"));
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {}: {verdict} - {label}: {detail} ({seconds:.1}s)", i + 1);
        if !pass {
            failures.push(i + 1);
        }
    }
    assert!(failures.is_empty(), "failed acceptance criteria: {failures:?}");
}
