//! Subcommand dispatch: builds library objects from a configuration,
//! runs the requested operation, and assembles the report envelope.
//!
//! Failures split into validation errors (bad configuration, data, or
//! arguments; exit code 1) and numerical failures inside an operation
//! (exit code 2).

use std::time::Instant;

use serde_json::json;

use tubetest::covariance::{CovarianceKernel, KernelKind};
use tubetest::geometry::{
    critical_value, detect_singularities, exclusion_radius, tail_probability,
    tube_analysis, ManifoldSummary, SingularityClass, TubeConstants,
};
use tubetest::harness::{run_suite, ExperimentSpec};
use tubetest::model::{
    Dataset, DensityFamily, Domain, Estimation, MixingDistribution, NullModel,
    PerturbationModel,
};
use tubetest::oracle::{mc_null_distribution, mc_sup_tail};
use tubetest::score::{run_test, sequential_build, TestSpec};
use tubetest::Error;

use crate::config::{EstimationChoice, FamilyChoice, RunConfig};
use crate::report::{Report, SCHEMA_VERSION};

/// Dispatch failure, split by the exit code it maps to.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad configuration, data, or arguments; exit code 1.
    Validation(String),
    /// An operation failed numerically; exit code 2.
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Validation(e.0)
    }
}

/// Errors while building library objects from the configuration are the
/// user's input being rejected.
fn setup<T>(r: tubetest::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Validation(e.to_string()))
}

/// Errors inside an operation are numerical unless the library itself
/// classifies them as input or I/O problems.
fn compute<T>(r: tubetest::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        Error::Invalid(_) | Error::Io(_) => CliError::Validation(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    })
}

fn family_of(choice: FamilyChoice) -> DensityFamily {
    match choice {
        FamilyChoice::Binomial2 => DensityFamily::Binomial2,
        FamilyChoice::Normal => DensityFamily::NormalUnivariate,
    }
}

fn estimation_of(choice: EstimationChoice) -> Estimation {
    match choice {
        EstimationChoice::Fixed => Estimation::Fixed,
        EstimationChoice::Weights => Estimation::Weights,
        EstimationChoice::Full => Estimation::Full,
    }
}

fn mixing_of(config: &RunConfig) -> Result<MixingDistribution, CliError> {
    let points = config.null.points.iter().map(|&p| vec![p]).collect();
    setup(MixingDistribution::new(points, config.null.weights.clone()))
}

fn test_spec_of(config: &RunConfig) -> Result<(TestSpec, Domain), CliError> {
    let domain = setup(Domain::interval(config.perturbation.lo, config.perturbation.hi))?;
    let spec = TestSpec {
        family: family_of(config.null.family),
        mixing: mixing_of(config)?,
        estimation: estimation_of(config.null.estimation),
        domain: domain.clone(),
    };
    if config.perturbation.family != config.null.family {
        return Err(CliError::Validation(
            "null and perturbation families must agree for these commands".into(),
        ));
    }
    Ok((spec, domain))
}

/// Kernel of the configured null as written, without any data fit.
fn configured_kernel(config: &RunConfig) -> Result<CovarianceKernel, CliError> {
    let (spec, domain) = test_spec_of(config)?;
    let null = setup(NullModel::new(spec.family.clone(), spec.mixing, spec.estimation))?;
    let model = setup(PerturbationModel::new(null, spec.family, domain, 0.0))?;
    let kind = match spec.estimation {
        Estimation::Fixed => KernelKind::Fixed,
        _ => KernelKind::NuisanceAdjusted,
    };
    setup(CovarianceKernel::new(&model, kind))
}

/// Equispaced lattice on the search interval, optionally keeping clear
/// of the configured null's kernel singularities.
fn custom_grid(config: &RunConfig) -> Result<Option<Vec<Vec<f64>>>, CliError> {
    if config.test.grid == 401 && config.test.eps_excl.is_none() {
        return Ok(None);
    }
    let (lo, hi) = (config.perturbation.lo, config.perturbation.hi);
    let m = config.test.grid;
    let step = (hi - lo) / (m - 1) as f64;
    let mut grid: Vec<Vec<f64>> = (0..m).map(|i| vec![lo + step * i as f64]).collect();
    if let Some(eps) = config.test.eps_excl {
        let kernel = configured_kernel(config)?;
        let singular = compute(detect_singularities(&kernel, None))?;
        grid.retain(|p| {
            singular.iter().all(|s| (p[0] - s.location[0]).abs() >= eps)
        });
        if grid.is_empty() {
            return Err(CliError::Validation(
                "eps_excl removed every grid point".into(),
            ));
        }
    }
    Ok(Some(grid))
}

fn class_name(class: SingularityClass) -> &'static str {
    match class {
        SingularityClass::Flip => "flip",
        SingularityClass::Removable => "removable",
    }
}

fn manifold_json(m: &ManifoldSummary) -> serde_json::Value {
    json!({
        "dim": m.dim,
        "segments": m.segments,
        "holes": m.holes,
        "euler": m.euler,
        "singularities": m.singularities.iter().map(|s| json!({
            "location": s.location,
            "class": class_name(s.class),
        })).collect::<Vec<_>>(),
    })
}

fn constants_json(c: &TubeConstants) -> serde_json::Value {
    json!({
        "dim": c.dim,
        "zeta": c.zeta,
        "kappa0": c.kappa0,
        "ell0": c.ell0,
        "euler": c.euler,
    })
}

fn mixing_json(m: &MixingDistribution) -> serde_json::Value {
    json!({
        "points": m.points(),
        "weights": m.weights(),
    })
}

fn cmd_test(config: &RunConfig, data: &Dataset) -> Result<(serde_json::Value, Vec<String>), CliError> {
    let (spec, _) = test_spec_of(config)?;
    let grid = custom_grid(config)?;
    let outcome = compute(run_test(data, &spec, config.test.alpha, grid.as_deref()))?;
    let results = json!({
        "statistic": outcome.statistic,
        "critical": outcome.critical,
        "p_value": outcome.p_value,
        "argmax": outcome.argmax,
        "decision": outcome.decision,
        "fitted": mixing_json(&outcome.fitted),
        "manifold": manifold_json(&outcome.manifold),
        "constants": constants_json(&outcome.constants),
        "n": data.n(),
    });
    Ok((results, outcome.warnings))
}

fn cmd_build(config: &RunConfig, data: &Dataset) -> Result<(serde_json::Value, Vec<String>), CliError> {
    let (spec, domain) = test_spec_of(config)?;
    let outcome = compute(sequential_build(
        data,
        &spec.family,
        &domain,
        config.test.alpha,
        config.test.max_components,
    ))?;
    let results = json!({
        "final": mixing_json(&outcome.mixing),
        "trail": outcome.trail.iter().map(|s| json!({
            "components": s.components,
            "statistic": s.statistic,
            "critical": s.critical,
            "kappa0": s.kappa0,
            "ell0": s.ell0,
            "rejected": s.rejected,
        })).collect::<Vec<_>>(),
    });
    Ok((results, outcome.warnings))
}

fn cmd_constants(config: &RunConfig) -> Result<serde_json::Value, CliError> {
    let kernel = configured_kernel(config)?;
    let (manifold, constants) = compute(tube_analysis(&kernel, None))?;
    let critical = compute(critical_value(&constants, config.test.alpha))?;
    Ok(json!({
        "manifold": manifold_json(&manifold),
        "constants": constants_json(&constants),
        "alpha": config.test.alpha,
        "critical": critical,
    }))
}

fn cmd_tail(config: &RunConfig) -> Result<serde_json::Value, CliError> {
    for &c in &config.mc.thresholds {
        if c <= 0.0 {
            return Err(CliError::Validation(format!(
                "tail thresholds must be positive, got {c}"
            )));
        }
    }
    let kernel = configured_kernel(config)?;
    let (_, constants) = compute(tube_analysis(&kernel, None))?;
    let mut tail = Vec::with_capacity(config.mc.thresholds.len());
    for &c in &config.mc.thresholds {
        tail.push(compute(tail_probability(&constants, c))?);
    }
    Ok(json!({
        "thresholds": config.mc.thresholds,
        "tail": tail,
    }))
}

fn cmd_critical(config: &RunConfig) -> Result<serde_json::Value, CliError> {
    let kernel = configured_kernel(config)?;
    let (_, constants) = compute(tube_analysis(&kernel, None))?;
    let critical = compute(critical_value(&constants, config.test.alpha))?;
    Ok(json!({
        "alpha": config.test.alpha,
        "critical": critical,
    }))
}

fn cmd_oracle(config: &RunConfig) -> Result<serde_json::Value, CliError> {
    match config.mc.n {
        Some(n) => {
            let (spec, _) = test_spec_of(config)?;
            let dist = compute(mc_null_distribution(
                &spec,
                n,
                config.mc.replicates,
                &config.mc.thresholds,
                config.mc.seed,
            ))?;
            Ok(json!({
                "mode": "null_distribution",
                "n": n,
                "replicates": config.mc.replicates,
                "thresholds": dist.thresholds,
                "rates": dist.rates,
                "std_errors": dist.std_errors,
                "failures": dist.failures,
            }))
        }
        None => {
            let kernel = configured_kernel(config)?;
            let singular = compute(detect_singularities(&kernel, None))?;
            let mut grid = compute(tubetest::score::default_grid(&kernel, &singular))?;
            // The direct field simulation cannot use points where the
            // normalization degenerates.
            grid.retain(|p| {
                singular.iter().all(|s| {
                    let d: f64 = s
                        .location
                        .iter()
                        .zip(p)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    d >= exclusion_radius(&kernel, s.class)
                })
            });
            let curve = compute(mc_sup_tail(
                &kernel,
                &grid,
                &config.mc.thresholds,
                config.mc.replicates,
                config.mc.seed,
            ))?;
            Ok(json!({
                "mode": "field",
                "grid_points": grid.len(),
                "replicates": curve.replicates,
                "thresholds": curve.thresholds,
                "exceedance": curve.exceedance,
                "std_errors": curve.std_errors,
            }))
        }
    }
}

fn cmd_simulate(config: &RunConfig) -> Result<serde_json::Value, CliError> {
    let Some(exp) = &config.experiment else {
        return Err(CliError::Validation(
            "simulate needs an [experiment] section".into(),
        ));
    };
    let mut specs = Vec::new();
    for &model in &exp.models {
        for &eta in &exp.etas {
            for &n in &exp.ns {
                specs.push(ExperimentSpec {
                    model,
                    eta,
                    n,
                    replicates: config.mc.replicates,
                    alpha: config.test.alpha,
                    seed: config.mc.seed,
                });
            }
        }
    }
    // The suite writes its aggregate to the configured output path; the
    // envelope written afterwards replaces it with the same content
    // wrapped in the report schema.
    let suite = compute(run_suite(&specs, std::path::Path::new(&config.output.path)))?;
    serde_json::to_value(&suite)
        .map_err(|e| CliError::Numerical(format!("serializing suite: {e}")))
}

/// Runs one subcommand and wraps its results in the report envelope.
pub fn dispatch(
    command: &str,
    config: &RunConfig,
    data: Option<&Dataset>,
) -> Result<Report, CliError> {
    let start = Instant::now();
    let mut warnings = config.warnings.clone();
    let need_data = || -> Result<&Dataset, CliError> {
        data.ok_or_else(|| CliError::Validation(format!("`{command}` needs a dataset")))
    };
    let results = match command {
        "test" => {
            let (results, w) = cmd_test(config, need_data()?)?;
            warnings.extend(w);
            results
        }
        "build" => {
            let (results, w) = cmd_build(config, need_data()?)?;
            warnings.extend(w);
            results
        }
        "constants" => cmd_constants(config)?,
        "tail" => cmd_tail(config)?,
        "critical" => cmd_critical(config)?,
        "oracle" => cmd_oracle(config)?,
        "simulate" => cmd_simulate(config)?,
        other => {
            return Err(CliError::Validation(format!("unknown subcommand `{other}`")))
        }
    };
    let config_echo = serde_json::to_value(config)
        .map_err(|e| CliError::Numerical(format!("echoing config: {e}")))?;
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        config_echo,
        results,
        warnings,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
