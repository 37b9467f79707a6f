//! Rejection-rate patterns of the three-model experiment grid: size
//! near nominal under the null and power rising with the perturbation
//! weight.

use tubetest::harness::{run_experiment, ExperimentSpec};

fn spec(model: u8, eta: f64, replicates: usize, seed: u64) -> ExperimentSpec {
    ExperimentSpec { model, eta, n: 200, replicates, alpha: 0.05, seed }
}

#[test]
fn null_rejection_rates_are_near_nominal() {
    for model in [1, 2, 3] {
        let report = run_experiment(&spec(model, 0.0, 300, 2024)).unwrap();
        assert!(
            report.completed >= 290,
            "model {model}: only {} replicates completed",
            report.completed
        );
        assert!(
            (0.02..=0.13).contains(&report.rate),
            "model {model}: null rate {}",
            report.rate
        );
    }
}

#[test]
fn power_is_monotone_in_the_perturbation_weight() {
    for model in [1, 2, 3] {
        let mut last: Option<(f64, f64)> = None;
        for eta in [0.0, 0.1, 0.2] {
            let report = run_experiment(&spec(model, eta, 100, 4 + model as u64)).unwrap();
            if let Some((prev_rate, prev_se)) = last {
                let slack = 2.0 * (prev_se * prev_se + report.std_error * report.std_error).sqrt();
                assert!(
                    report.rate >= prev_rate - slack,
                    "model {model}: rate fell from {prev_rate} to {} at eta {eta}",
                    report.rate
                );
            }
            last = Some((report.rate, report.std_error));
        }
    }
}
