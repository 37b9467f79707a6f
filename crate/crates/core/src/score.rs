//! Score process evaluation, mixture fitting and the calibrated test.
//!
//! The raw process at `theta` sums the centered density ratios
//! `u_i = psi(x_i; theta) / f(x_i) - 1` over the sample; normalization
//! divides by `sqrt(n C(theta, theta))` with the kernel matched to how
//! the null was obtained. Fitting routines produce the null mixture by
//! EM with exact M steps, refined by a damped Newton pass on the
//! stationarity system. `run_test` ties fitting, tube constants and the
//! supremum statistic together, and `sequential_build` grows a mixture
//! until the test stops rejecting.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{CovarianceKernel, KernelKind};
use crate::error::{Error, Result};
use crate::geometry::{
    critical_value, detect_singularities, exclusion_radius, tail_probability, tube_analysis,
    ManifoldSummary, Singularity, TubeConstants,
};
use crate::model::{
    Dataset, DensityFamily, Domain, Estimation, MixingDistribution, NullModel, PerturbationModel,
};

/// Grid points per axis in the default evaluation grid.
const GRID_POINTS: usize = 401;
/// Flanking points sit just outside the exclusion radius by this factor.
const FLANK_SCALE: f64 = 1.0 + 1e-7;
/// Bisection width for the profile maximizer in the mixing proportion.
const ETA_TOL: f64 = 1e-12;
/// Convergence threshold on weight changes in the weights-only EM.
const WEIGHT_TOL: f64 = 1e-10;
/// Fitted weights below this are removed.
const WEIGHT_FLOOR: f64 = 1e-8;
/// Support points closer than this are merged during the full fit.
const MERGE_TOL: f64 = 1e-8;
/// Target for the largest stationarity residual after refinement.
const STATIONARITY_TOL: f64 = 5e-7;

/// The score process evaluated over a parameter grid.
#[derive(Debug, Clone)]
pub struct ProcessEvaluation {
    pub grid: Vec<Vec<f64>>,
    /// Raw process values `S(theta)`.
    pub raw: Vec<f64>,
    /// Normalized values `S / sqrt(n C)`; `None` inside the exclusion
    /// radius of a singularity or where the kernel diagonal is not
    /// positive.
    pub normalized: Vec<Option<f64>>,
    pub n: usize,
    /// Indices of grid points excluded from normalization.
    pub excluded: Vec<usize>,
}

/// Null densities at every observation, validated positive.
pub(crate) fn base_densities(data: &Dataset, null: &NullModel) -> Result<Vec<f64>> {
    data.iter_rows()
        .map(|row| {
            let f = null.density(row)?;
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::SupportViolation(format!(
                    "null density is {f} at observation {row:?}"
                )));
            }
            Ok(f)
        })
        .collect()
}

fn raw_score(data: &Dataset, null: &NullModel, base: &[f64], theta: &[f64]) -> f64 {
    data.iter_rows()
        .zip(base)
        .map(|(row, &f)| null.centered_from(theta, row) / f)
        .sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn evaluate_process(
    data: &Dataset,
    kernel: &CovarianceKernel,
    grid: &[Vec<f64>],
    singular: &[Singularity],
) -> Result<ProcessEvaluation> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid("process grid is empty".into()));
    }
    let null = kernel.null();
    let base = base_densities(data, null)?;
    let n = data.n();
    let radii: Vec<f64> =
        singular.iter().map(|s| exclusion_radius(kernel, s.class)).collect();
    let mut raw = Vec::with_capacity(grid.len());
    let mut normalized = Vec::with_capacity(grid.len());
    let mut excluded = Vec::new();
    for (idx, theta) in grid.iter().enumerate() {
        raw.push(raw_score(data, null, &base, theta));
        let near = singular
            .iter()
            .zip(&radii)
            .any(|(s, &r)| dist(&s.location, theta) < r);
        if near {
            excluded.push(idx);
            normalized.push(None);
            continue;
        }
        let profile = kernel.profile(theta)?;
        let var = kernel.cov_p(&profile, &profile);
        if var > 0.0 {
            normalized.push(Some(raw[idx] / (n as f64 * var).sqrt()));
        } else {
            excluded.push(idx);
            normalized.push(None);
        }
    }
    Ok(ProcessEvaluation { grid: grid.to_vec(), raw, normalized, n, excluded })
}

/// Evaluates the process for a null with known parameters.
pub fn score_process(
    data: &Dataset,
    kernel: &CovarianceKernel,
    grid: &[Vec<f64>],
) -> Result<ProcessEvaluation> {
    if kernel.kind() != KernelKind::Fixed {
        return Err(Error::Invalid(
            "plain score process needs a fixed-parameter kernel".into(),
        ));
    }
    let singular = detect_singularities(kernel, None)?;
    evaluate_process(data, kernel, grid, &singular)
}

/// Evaluates the process normalized by the adjusted kernel, for nulls
/// whose parameters were estimated.
pub fn score_process_nuisance(
    data: &Dataset,
    kernel: &CovarianceKernel,
    grid: &[Vec<f64>],
) -> Result<ProcessEvaluation> {
    if kernel.kind() != KernelKind::NuisanceAdjusted {
        return Err(Error::Invalid(
            "nuisance-adjusted process needs an adjusted kernel".into(),
        ));
    }
    let singular = detect_singularities(kernel, None)?;
    evaluate_process(data, kernel, grid, &singular)
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Largest normalized value and where it occurs; exact ties go to the
/// lexicographically smallest grid point.
pub fn statistic(eval: &ProcessEvaluation) -> Result<(f64, Vec<f64>)> {
    let mut best: Option<(f64, &[f64])> = None;
    for (theta, value) in eval.grid.iter().zip(&eval.normalized) {
        let Some(v) = *value else { continue };
        let replace = match best {
            None => true,
            Some((bv, bt)) => v > bv || (v == bv && lex_less(theta, bt)),
        };
        if replace {
            best = Some((v, theta));
        }
    }
    match best {
        Some((v, theta)) => Ok((v, theta.to_vec())),
        None => Err(Error::EmptyGrid(
            "every grid point fell inside an exclusion zone".into(),
        )),
    }
}

/// The likelihood derivative in the mixing proportion is decreasing, so
/// endpoint signs decide between boundary solutions and an interior
/// root; observations with zero perturbation density drive the right
/// endpoint to negative infinity and are handled by the same test.
pub(crate) fn eta_hat_from(u: &[f64]) -> f64 {
    let deriv = |eta: f64| -> f64 { u.iter().map(|&ui| ui / (1.0 + eta * ui)).sum() };
    if deriv(0.0) <= 0.0 {
        return 0.0;
    }
    if deriv(1.0) >= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        if hi - lo <= ETA_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if deriv(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Maximizer over [0, 1] of the mixture log likelihood in the mixing
/// proportion, with the perturbation pinned at `theta`.
pub fn eta_hat(data: &Dataset, null: &NullModel, theta: &[f64]) -> Result<f64> {
    let base = base_densities(data, null)?;
    let u: Vec<f64> = data
        .iter_rows()
        .zip(&base)
        .map(|(row, &f)| null.centered_from(theta, row) / f)
        .collect();
    Ok(eta_hat_from(&u))
}

/// Profile log likelihood ratio over the grid; zero wherever the
/// constrained maximizer sits at the null boundary.
pub fn lrt_profile(data: &Dataset, null: &NullModel, grid: &[Vec<f64>]) -> Result<Vec<f64>> {
    let base = base_densities(data, null)?;
    let mut out = Vec::with_capacity(grid.len());
    for theta in grid {
        let u: Vec<f64> = data
            .iter_rows()
            .zip(&base)
            .map(|(row, &f)| null.centered_from(theta, row) / f)
            .collect();
        let eta = eta_hat_from(&u);
        let value = if eta == 0.0 {
            0.0
        } else {
            u.iter().map(|&ui| (eta * ui).ln_1p()).sum::<f64>()
        };
        out.push(value.max(0.0));
    }
    Ok(out)
}

/// Component densities `psi[j][i]`, validated against the family.
fn component_densities(
    data: &Dataset,
    family: &DensityFamily,
    points: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .map(|p| data.iter_rows().map(|row| family.density(p, row)).collect())
        .collect()
}

fn component_densities_unchecked(
    data: &Dataset,
    family: &DensityFamily,
    points: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| data.iter_rows().map(|row| family.density_unchecked(p, row)).collect())
        .collect()
}

fn mixture_values(psi: &[Vec<f64>], beta: &[f64]) -> Vec<f64> {
    let n = psi[0].len();
    (0..n)
        .map(|i| psi.iter().zip(beta).map(|(col, &b)| b * col[i]).sum())
        .collect()
}

/// Maximum likelihood mixing weights on fixed support points, via the
/// multiplicative EM update from a uniform start. Weights that end
/// below the floor are removed and the rest renormalized.
pub fn fit_weights(
    data: &Dataset,
    family: &DensityFamily,
    points: &[Vec<f64>],
) -> Result<MixingDistribution> {
    fit_weights_trail(data, family, points).map(|(mixing, _)| mixing)
}

/// Like [`fit_weights`], but also returns the loglikelihood at the start
/// of every update sweep, for auditing that no sweep decreases it.
pub fn fit_weights_trail(
    data: &Dataset,
    family: &DensityFamily,
    points: &[Vec<f64>],
) -> Result<(MixingDistribution, Vec<f64>)> {
    let m = points.len();
    // Validates point ordering and distinctness up front.
    MixingDistribution::new(points.to_vec(), vec![1.0 / m as f64; m])?;
    for p in points {
        family.check_interior(p)?;
    }
    let n = data.n();
    let psi = component_densities(data, family, points)?;
    for i in 0..n {
        if (0..m).all(|j| !(psi[j][i] > 0.0)) {
            return Err(Error::SupportViolation(format!(
                "observation {:?} has zero density under every component",
                data.row(i)
            )));
        }
    }
    let mut beta = vec![1.0 / m as f64; m];
    let mut trail = Vec::new();
    for _ in 0..10_000 {
        let g = mixture_values(&psi, &beta);
        if g.iter().any(|gi| !(gi > &0.0)) {
            return Err(Error::DegenerateFit(
                "mixture density vanished at an observation during fitting".into(),
            ));
        }
        trail.push(g.iter().map(|gi| gi.ln()).sum::<f64>());
        let mut delta = 0.0_f64;
        for j in 0..m {
            let mean: f64 =
                psi[j].iter().zip(&g).map(|(&p, &gi)| p / gi).sum::<f64>() / n as f64;
            let next = beta[j] * mean;
            delta = delta.max((next - beta[j]).abs());
            beta[j] = next;
        }
        if delta < WEIGHT_TOL {
            break;
        }
    }
    let mut kept_points = Vec::new();
    let mut kept_weights = Vec::new();
    for (p, &b) in points.iter().zip(&beta) {
        if b >= WEIGHT_FLOOR {
            kept_points.push(p.clone());
            kept_weights.push(b);
        }
    }
    if kept_points.is_empty() {
        return Err(Error::DegenerateFit("every mixing weight collapsed to zero".into()));
    }
    let total: f64 = kept_weights.iter().sum();
    kept_weights.iter_mut().for_each(|w| *w /= total);
    Ok((MixingDistribution::new(kept_points, kept_weights)?, trail))
}

/// Result of a full mixture fit.
#[derive(Debug, Clone)]
pub struct FullFit {
    pub mixing: MixingDistribution,
    /// Log likelihood at the fitted parameters.
    pub loglik: f64,
    pub warnings: Vec<String>,
}

fn sort_components(points: &mut [Vec<f64>], weights: &mut [f64]) {
    if points.first().map_or(true, |p| p.len() != 1) {
        return;
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
    let pts: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    let wts: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    points.clone_from_slice(&pts);
    weights.copy_from_slice(&wts);
}

fn em_full(
    data: &Dataset,
    family: &DensityFamily,
    points: &mut Vec<Vec<f64>>,
    weights: &mut Vec<f64>,
) -> Result<f64> {
    let n = data.n();
    let d = family.obs_dim();
    let mut prev = f64::NEG_INFINITY;
    for iter in 0..2_000 {
        let psi = if iter == 0 {
            component_densities(data, family, points)?
        } else {
            component_densities_unchecked(data, family, points)
        };
        let g = mixture_values(&psi, weights);
        if g.iter().any(|gi| !(gi > &0.0)) {
            return Err(Error::DegenerateFit(
                "mixture density vanished at an observation during fitting".into(),
            ));
        }
        let ll: f64 = g.iter().map(|gi| gi.ln()).sum();
        let m = points.len();
        let mut nj = vec![0.0; m];
        let mut mean = vec![vec![0.0; d]; m];
        for (i, row) in data.iter_rows().enumerate() {
            for j in 0..m {
                let r = weights[j] * psi[j][i] / g[i];
                nj[j] += r;
                for k in 0..d {
                    mean[j][k] += r * row[k];
                }
            }
        }
        for j in 0..m {
            weights[j] = nj[j] / n as f64;
            if nj[j] > 0.0 {
                mean[j].iter_mut().for_each(|v| *v /= nj[j]);
                points[j] = family.param_from_mean(&mean[j])?;
            }
        }
        sort_components(points, weights);
        if (ll - prev).abs() < 1e-10 {
            return Ok(ll);
        }
        prev = ll;
    }
    Ok(prev)
}

/// Removes weightless components and merges support points that landed
/// on top of each other; returns whether the structure changed.
fn cleanup_components(
    points: &mut Vec<Vec<f64>>,
    weights: &mut Vec<f64>,
    warnings: &mut Vec<String>,
) -> bool {
    let mut changed = false;
    let mut j = 0;
    while j < points.len() {
        if weights[j] < WEIGHT_FLOOR && points.len() > 1 {
            warnings.push(format!(
                "component at {:?} lost its weight and was removed",
                points[j]
            ));
            points.remove(j);
            weights.remove(j);
            changed = true;
        } else {
            j += 1;
        }
    }
    let mut a = 0;
    while a < points.len() {
        let mut b = a + 1;
        while b < points.len() {
            if dist(&points[a], &points[b]) < MERGE_TOL {
                warnings.push(format!(
                    "support points {:?} and {:?} merged",
                    points[a], points[b]
                ));
                let total = weights[a] + weights[b];
                for k in 0..points[a].len() {
                    points[a][k] =
                        (weights[a] * points[a][k] + weights[b] * points[b][k]) / total;
                }
                weights[a] = total;
                points.remove(b);
                weights.remove(b);
                changed = true;
            } else {
                b += 1;
            }
        }
        a += 1;
    }
    if changed {
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
    }
    changed
}

fn unpack_params(p: &[f64], m: usize, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut weights = p[..m - 1].to_vec();
    weights.push(1.0 - weights.iter().sum::<f64>());
    let points = p[m - 1..].chunks(d).map(|c| c.to_vec()).collect();
    (weights, points)
}

/// Residuals of the stationarity system: the weight equations for all
/// but the last component (the last is implied by normalization) and
/// the likelihood gradient in every support coordinate. `None` when the
/// mixture density is not positive at some observation.
fn stationarity(
    data: &Dataset,
    family: &DensityFamily,
    weights: &[f64],
    points: &[Vec<f64>],
) -> Option<Vec<f64>> {
    let m = points.len();
    let d = points[0].len();
    let psi = component_densities_unchecked(data, family, points);
    let g = mixture_values(&psi, weights);
    if g.iter().any(|gi| !(gi > &0.0)) {
        return None;
    }
    let n = data.n() as f64;
    let mut r = vec![0.0; (m - 1) + m * d];
    for (i, row) in data.iter_rows().enumerate() {
        for j in 0..m {
            if j < m - 1 {
                r[j] += psi[j][i] / g[i];
            }
            let dpsi = family.density_dtheta(&points[j], row);
            for k in 0..d {
                r[m - 1 + j * d + k] += weights[j] * dpsi[k] / g[i];
            }
        }
    }
    for rj in r.iter_mut().take(m - 1) {
        *rj -= n;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(r)
}

fn feasible(family: &DensityFamily, weights: &[f64], points: &[Vec<f64>]) -> bool {
    if weights.len() > 1 && weights.iter().any(|&w| w < 1e-9) {
        return false;
    }
    for p in points {
        if family.check_interior(p).is_err() {
            return false;
        }
    }
    if points[0].len() == 1 {
        for pair in points.windows(2) {
            if pair[1][0] - pair[0][0] < 1e-9 {
                return false;
            }
        }
    }
    true
}

/// Damped Newton pass pushing the fit to the stationarity system, with
/// a finite-difference Jacobian and feasibility-preserving line search.
fn newton_polish(
    data: &Dataset,
    family: &DensityFamily,
    points: &mut Vec<Vec<f64>>,
    weights: &mut Vec<f64>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let m = points.len();
    let d = points[0].len();
    let np = (m - 1) + m * d;
    let mut p: Vec<f64> = Vec::with_capacity(np);
    p.extend_from_slice(&weights[..m - 1]);
    for pt in points.iter() {
        p.extend_from_slice(pt);
    }
    let Some(mut r) = stationarity(data, family, weights, points) else {
        warnings.push("stationarity system undefined at the fitted point".into());
        return Ok(());
    };
    for _ in 0..50 {
        let rmax = r.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if rmax < STATIONARITY_TOL {
            break;
        }
        let mut jac = DMatrix::zeros(np, np);
        let mut complete = true;
        for k in 0..np {
            let h = 1e-6 * (1.0 + p[k].abs());
            let mut pp = p.clone();
            pp[k] += h;
            let mut pm = p.clone();
            pm[k] -= h;
            let (wp, ptp) = unpack_params(&pp, m, d);
            let (wm, ptm) = unpack_params(&pm, m, d);
            let (Some(rp), Some(rm)) = (
                stationarity(data, family, &wp, &ptp),
                stationarity(data, family, &wm, &ptm),
            ) else {
                complete = false;
                break;
            };
            for row in 0..np {
                jac[(row, k)] = (rp[row] - rm[row]) / (2.0 * h);
            }
        }
        if !complete {
            warnings.push("stationarity Jacobian undefined near the fitted point".into());
            break;
        }
        let rhs = DVector::from_iterator(np, r.iter().map(|v| -v));
        let Some(step) = jac.lu().solve(&rhs) else {
            warnings.push("singular Jacobian in the stationarity refinement".into());
            break;
        };
        let norm0: f64 = r.iter().map(|v| v * v).sum();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let cand: Vec<f64> =
                p.iter().zip(step.iter()).map(|(a, s)| a + alpha * s).collect();
            let (w, pts) = unpack_params(&cand, m, d);
            if feasible(family, &w, &pts) {
                if let Some(rc) = stationarity(data, family, &w, &pts) {
                    let normc: f64 = rc.iter().map(|v| v * v).sum();
                    if normc < norm0 {
                        p = cand;
                        r = rc;
                        accepted = true;
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let rmax = r.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if rmax >= 1e-6 {
        warnings.push(format!("stationarity residual {rmax:.2e} after refinement"));
    }
    let (w, pts) = unpack_params(&p, m, d);
    *weights = w;
    *points = pts;
    Ok(())
}

/// Maximum likelihood mixture with both weights and support points
/// free: EM with exact M steps, cleanup of collapsed components, then a
/// Newton pass on the stationarity system. Initial points are fitted
/// from uniform starting weights.
pub fn fit_full(
    data: &Dataset,
    family: &DensityFamily,
    initial: &[Vec<f64>],
) -> Result<FullFit> {
    if initial.is_empty() {
        return Err(Error::Invalid("full fit needs at least one support point".into()));
    }
    for p in initial {
        family.check_interior(p)?;
    }
    let mut points = initial.to_vec();
    let mut weights = vec![1.0 / points.len() as f64; points.len()];
    sort_components(&mut points, &mut weights);
    let mut warnings = Vec::new();
    for _ in 0..4 {
        em_full(data, family, &mut points, &mut weights)?;
        if !cleanup_components(&mut points, &mut weights, &mut warnings) {
            break;
        }
    }
    newton_polish(data, family, &mut points, &mut weights, &mut warnings)?;
    let psi = component_densities(data, family, &points)?;
    let loglik = mixture_values(&psi, &weights).iter().map(|g| g.ln()).sum();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mixing = MixingDistribution::new(points, weights)?;
    Ok(FullFit { mixing, loglik, warnings })
}

/// Evaluation grid: equispaced points per axis over the domain plus
/// flanking points just outside each exclusion zone, so the supremum
/// sees both sides of every singularity.
pub fn default_grid(
    kernel: &CovarianceKernel,
    singular: &[Singularity],
) -> Result<Vec<Vec<f64>>> {
    let domain = kernel.domain();
    let (lo, hi) = domain.bounds();
    match domain.dim() {
        1 => {
            let span = hi[0] - lo[0];
            let mut pts: Vec<f64> = (0..GRID_POINTS)
                .map(|i| lo[0] + span * i as f64 / (GRID_POINTS - 1) as f64)
                .collect();
            for s in singular {
                let r = exclusion_radius(kernel, s.class) * FLANK_SCALE;
                for cand in [s.location[0] - r, s.location[0] + r] {
                    if domain.contains(&[cand]) {
                        pts.push(cand);
                    }
                }
            }
            pts.sort_by(f64::total_cmp);
            pts.dedup_by(|a, b| (*a - *b).abs() < 1e-13 * span);
            Ok(pts.into_iter().map(|v| vec![v]).collect())
        }
        2 => {
            let steps = GRID_POINTS - 1;
            let mut grid = Vec::new();
            for i in 0..GRID_POINTS {
                let x = lo[0] + (hi[0] - lo[0]) * i as f64 / steps as f64;
                for j in 0..GRID_POINTS {
                    let y = lo[1] + (hi[1] - lo[1]) * j as f64 / steps as f64;
                    let p = vec![x, y];
                    if domain.contains(&p) {
                        grid.push(p);
                    }
                }
            }
            for s in singular {
                let r = exclusion_radius(kernel, s.class) * FLANK_SCALE;
                for axis in 0..2 {
                    for sign in [-1.0, 1.0] {
                        let mut p = s.location.clone();
                        p[axis] += sign * r;
                        if domain.contains(&p) {
                            grid.push(p);
                        }
                    }
                }
            }
            Ok(grid)
        }
        d => Err(Error::UnsupportedDimension(format!(
            "no default grid for {d}-dimensional domains"
        ))),
    }
}

/// Everything needed to specify one test run.
#[derive(Debug, Clone)]
pub struct TestSpec {
    pub family: DensityFamily,
    /// Null mixture as given when estimation is fixed, otherwise the
    /// starting point of the fit.
    pub mixing: MixingDistribution,
    pub estimation: Estimation,
    pub domain: Domain,
}

/// Outcome of one calibrated test.
#[derive(Debug, Clone)]
pub struct TestOutcome {
    pub statistic: f64,
    pub critical: f64,
    pub p_value: f64,
    /// Grid maximizer of the normalized process.
    pub argmax: Vec<f64>,
    /// Null mixture actually used, after any fitting.
    pub fitted: MixingDistribution,
    pub manifold: ManifoldSummary,
    pub constants: TubeConstants,
    /// Whether the statistic reached the critical value.
    pub decision: bool,
    pub warnings: Vec<String>,
}

/// Fits the null as requested, builds the matching kernel and tube
/// constants, and evaluates the supremum test at level `alpha`. A grid
/// may be supplied; otherwise the default grid is used.
pub fn run_test(
    data: &Dataset,
    spec: &TestSpec,
    alpha: f64,
    grid: Option<&[Vec<f64>]>,
) -> Result<TestOutcome> {
    let mut warnings = Vec::new();
    let fitted = match spec.estimation {
        Estimation::Fixed => spec.mixing.clone(),
        Estimation::Weights => fit_weights(data, &spec.family, spec.mixing.points())?,
        Estimation::Full => {
            let fit = fit_full(data, &spec.family, spec.mixing.points())?;
            warnings.extend(fit.warnings.iter().cloned());
            fit.mixing
        }
    };
    let null = NullModel::new(spec.family.clone(), fitted.clone(), spec.estimation)?;
    let model = PerturbationModel::new(null, spec.family.clone(), spec.domain.clone(), 0.0)?;
    let kind = match spec.estimation {
        Estimation::Fixed => KernelKind::Fixed,
        _ => KernelKind::NuisanceAdjusted,
    };
    let kernel = CovarianceKernel::new(&model, kind)?;
    let (manifold, constants) = tube_analysis(&kernel, None)?;
    let owned;
    let grid_ref: &[Vec<f64>] = match grid {
        Some(g) => g,
        None => {
            owned = default_grid(&kernel, &manifold.singularities)?;
            &owned
        }
    };
    let eval = evaluate_process(data, &kernel, grid_ref, &manifold.singularities)?;
    let (stat, argmax) = statistic(&eval)?;
    let critical = critical_value(&constants, alpha)?;
    let p_value = if stat > 0.0 { tail_probability(&constants, stat)? } else { 1.0 };
    Ok(TestOutcome {
        statistic: stat,
        critical,
        p_value,
        argmax,
        fitted,
        manifold,
        constants,
        decision: stat >= critical,
        warnings,
    })
}

/// One stage of the stepwise mixture build.
#[derive(Debug, Clone)]
pub struct BuildStep {
    pub components: usize,
    pub statistic: f64,
    pub critical: f64,
    pub kappa0: f64,
    pub ell0: f64,
    pub rejected: bool,
}

/// Result of the stepwise build: the accepted mixture and the trail of
/// every stage tested along the way.
#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub mixing: MixingDistribution,
    pub trail: Vec<BuildStep>,
    pub warnings: Vec<String>,
}

/// Grows a mixture one component at a time: each stage fits the current
/// order fully, tests for a remaining component, and on rejection seeds
/// a new component at the maximizer. Stops at the first non-rejection
/// or at the component cap.
pub fn sequential_build(
    data: &Dataset,
    family: &DensityFamily,
    domain: &Domain,
    alpha: f64,
    max_components: usize,
) -> Result<BuildOutcome> {
    if max_components == 0 {
        return Err(Error::Invalid("component cap must be positive".into()));
    }
    let mut supports = vec![family.param_from_mean(&data.mean())?];
    let mut trail = Vec::new();
    let mut warnings = Vec::new();
    loop {
        let m = supports.len();
        let mixing = MixingDistribution::new(supports.clone(), vec![1.0 / m as f64; m])?;
        let spec = TestSpec {
            family: family.clone(),
            mixing,
            estimation: Estimation::Full,
            domain: domain.clone(),
        };
        let outcome = run_test(data, &spec, alpha, None)?;
        trail.push(BuildStep {
            components: outcome.fitted.len(),
            statistic: outcome.statistic,
            critical: outcome.critical,
            kappa0: outcome.constants.kappa0,
            ell0: outcome.constants.ell0,
            rejected: outcome.decision,
        });
        warnings.extend(outcome.warnings.iter().cloned());
        if !outcome.decision {
            return Ok(BuildOutcome { mixing: outcome.fitted, trail, warnings });
        }
        if outcome.fitted.len() >= max_components {
            warnings.push(format!(
                "stopped at {} components while still rejecting",
                outcome.fitted.len()
            ));
            return Ok(BuildOutcome { mixing: outcome.fitted, trail, warnings });
        }
        supports = outcome.fitted.points().to_vec();
        if supports.iter().any(|p| dist(p, &outcome.argmax) < MERGE_TOL) {
            warnings.push("maximizer coincides with a fitted support point".into());
            return Ok(BuildOutcome { mixing: outcome.fitted, trail, warnings });
        }
        supports.push(outcome.argmax.clone());
        sort_supports(&mut supports);
    }
}

fn sort_supports(supports: &mut [Vec<f64>]) {
    if supports.first().map_or(false, |p| p.len() == 1) {
        supports.sort_by(|a, b| a[0].total_cmp(&b[0]));
    }
}
