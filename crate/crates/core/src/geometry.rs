//! Geometry of the correlation manifold and the volume-of-tube tail.
//!
//! The normalized score field traces a manifold on the unit sphere as the
//! perturbation parameter sweeps the domain. Its tail probability is an
//! expansion in geometric constants: the manifold volume `kappa0`, the
//! boundary volume `ell0`, and (in the plane) an Euler characteristic
//! term. All constants reduce to integrals of derivatives of the kernel
//! correlation, which this module evaluates by central finite differences
//! of `log C`.
//!
//! Differencing the logarithm instead of the raw kernel matters at
//! singular points. Near a point `s` where the kernel diagonal vanishes,
//! `C` factors to leading order into a product of one function of each
//! argument times a smooth remainder; the product part is annihilated
//! exactly by the mixed second difference of the logarithm, so the
//! integrand stays finite and the computation stays conditioned where the
//! raw determinant would lose every significant digit.
//!
//! Singular points are excluded by small balls and the integral is
//! extrapolated linearly in the exclusion radius, mirroring the analytic
//! limit. Flip singularities additionally cut the domain into segments
//! (the field's sign flips across them, so the manifold disconnects);
//! removable ones do not.

use std::cell::RefCell;
use std::f64::consts::PI;

use statrs::function::erf::erfc;

use crate::covariance::{CovarianceKernel, EvalStrategy, KernelKind, ThetaProfile};
use crate::error::{Error, Result};
use crate::model::{Domain, Estimation};
use crate::quad::{integrate_excluding, QuadSpec};

/// Central finite-difference step as a fraction of the domain width.
const FD_STEP_FRACTION: f64 = 1e-4;
/// Exclusion radius around singular points, fraction of domain width.
const EXCLUSION_FRACTION: f64 = 1e-4;
/// Wider exclusion for removable points on quadrature-backed kernels: the
/// adjusted diagonal decays like the fourth power of the distance there,
/// so quadrature noise dominates the kernel much closer to the point.
const EXCLUSION_FRACTION_REMOVABLE_QUAD: f64 = 4e-3;
/// A diagonal this far below the probe diagonal counts as vanishing.
const SINGULAR_DIAG_RATIO: f64 = 1e-8;
/// Relative probe offset used to classify singular points.
const PROBE_FRACTION: f64 = 1e-2;
/// Nodes of the periodic trapezoid rule on circles.
const CIRCLE_NODES: usize = 512;
/// Relative rounding error assumed for one kernel evaluation.
const DOT_REL_EPS: f64 = 4e-15;
/// Second differences below this multiple of their propagated rounding
/// noise are treated as exact zeros. Rank-deficient kernels (a manifold
/// collapsed to a point) then yield an identically zero curvature
/// integrand instead of amplified noise.
const NOISE_CLAMP: f64 = 8.0;

/// How the kernel diagonal vanishes at a singular point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingularityClass {
    /// Diagonal vanishes quadratically; the field flips sign across the
    /// point and the manifold disconnects there.
    Flip,
    /// Diagonal vanishes quartically; the normalized field extends
    /// continuously through the point.
    Removable,
}

/// A point where the kernel diagonal vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct Singularity {
    pub location: Vec<f64>,
    pub class: SingularityClass,
}

/// Boundary structure of the manifold's parameter domain.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryDescriptor {
    /// One-dimensional pieces after cutting at flip points.
    Interval { pieces: Vec<(f64, f64)> },
    /// Origin-centered disk, possibly with a hole cut at the center.
    Disk { radius: f64, holes: usize },
    /// Planar box with no interior singular points.
    PlanarBox { lo: Vec<f64>, hi: Vec<f64> },
}

/// Topology of the manifold: connected pieces, holes and Euler
/// characteristic, plus the singular points that produced them.
#[derive(Debug, Clone)]
pub struct ManifoldSummary {
    pub dim: usize,
    pub singularities: Vec<Singularity>,
    /// Connected pieces; in one dimension, flips + 1.
    pub segments: usize,
    /// Interior holes (planar domains only).
    pub holes: usize,
    /// Euler characteristic of the manifold.
    pub euler: i64,
    pub boundary: BoundaryDescriptor,
}

/// Geometric constants of the tube expansion.
#[derive(Debug, Clone)]
pub struct TubeConstants {
    pub dim: usize,
    /// Series coefficients, one per chi-square order.
    pub zeta: Vec<f64>,
    /// Volume of the manifold.
    pub kappa0: f64,
    /// Volume of the manifold boundary.
    pub ell0: f64,
    pub euler: i64,
}

/// Finds points where the kernel diagonal vanishes and classifies them.
///
/// Candidates default to the null support points inside the domain;
/// `declared` overrides the candidate list (used after fitting, when the
/// kernel is built at estimated support points). The class follows from
/// the model structure: jointly estimated support points give removable
/// singularities, everything else flips. A scaling probe of the diagonal
/// must confirm the structural class.
pub fn detect_singularities(
    kernel: &CovarianceKernel,
    declared: Option<&[Vec<f64>]>,
) -> Result<Vec<Singularity>> {
    let domain = kernel.domain();
    let dim = domain.dim();
    let w = domain.width();
    let tau = PROBE_FRACTION * w;
    let defaults: Vec<Vec<f64>>;
    let candidates: &[Vec<f64>] = match declared {
        Some(list) => list,
        None => {
            defaults = kernel.null().mixing.points().to_vec();
            &defaults
        }
    };
    let structural = if kernel.kind() == KernelKind::NuisanceAdjusted
        && kernel.null().estimation == Estimation::Full
    {
        SingularityClass::Removable
    } else {
        SingularityClass::Flip
    };
    let mut out = Vec::new();
    for s in candidates {
        if s.len() != dim || !interior(domain, s, 1e-12 * w) {
            continue;
        }
        let probe = |t: f64| -> Result<f64> {
            let mut p = s.clone();
            p[0] += t;
            kernel.variance(&p)
        };
        let d0 = kernel.variance(s)?;
        let d_tau = probe(tau)?;
        if !(d_tau > 0.0) {
            return Err(Error::Evaluation(format!(
                "kernel diagonal not positive at probe offset from {s:?}"
            )));
        }
        if d0.abs() >= SINGULAR_DIAG_RATIO * d_tau {
            continue;
        }
        // Leading order of the diagonal: ratio 4 per halving means t^2
        // (flip), ratio 16 means t^4 (removable).
        let d_half = probe(0.5 * tau)?;
        if !(d_half > 0.0) {
            return Err(Error::Evaluation(format!(
                "kernel diagonal not positive near {s:?}"
            )));
        }
        let order = (d_tau / d_half).log2();
        let numeric = if order < 3.0 {
            SingularityClass::Flip
        } else {
            SingularityClass::Removable
        };
        if numeric != structural {
            return Err(Error::ClassificationConflict(format!(
                "diagonal near {:?} scales with exponent {:.2}, inconsistent with the {:?} class implied by the estimation mode",
                s,
                order,
                structural
            )));
        }
        // Cross-point correlation confirms: a flip reverses the field's
        // sign across the point, a removable point does not.
        let mut a = s.clone();
        let mut b = s.clone();
        a[0] -= 0.25 * tau;
        b[0] += 0.25 * tau;
        let rho = kernel.corr(&a, &b)?;
        let sign_ok = match structural {
            SingularityClass::Flip => rho < -0.5,
            SingularityClass::Removable => rho > 0.5,
        };
        if !sign_ok {
            return Err(Error::ClassificationConflict(format!(
                "correlation across {s:?} is {rho:.3}, inconsistent with {structural:?}"
            )));
        }
        out.push(Singularity { location: s.clone(), class: structural });
    }
    if dim == 1 {
        out.sort_by(|x, y| x.location[0].total_cmp(&y.location[0]));
    }
    Ok(out)
}

fn interior(domain: &Domain, p: &[f64], margin: f64) -> bool {
    if !domain.contains(p) {
        return false;
    }
    match domain {
        Domain::Box { lo, hi } => p
            .iter()
            .enumerate()
            .all(|(k, &v)| v > lo[k] + margin && v < hi[k] - margin),
        Domain::Disk { radius } => {
            p.iter().map(|v| v * v).sum::<f64>().sqrt() < radius - margin
        }
    }
}

/// Derives the topology of the manifold from its singular points.
pub fn manifold_summary(
    kernel: &CovarianceKernel,
    singularities: Vec<Singularity>,
) -> Result<ManifoldSummary> {
    let domain = kernel.domain();
    match domain {
        Domain::Box { lo, hi } if lo.len() == 1 => {
            let mut cuts: Vec<f64> = singularities
                .iter()
                .filter(|s| s.class == SingularityClass::Flip)
                .map(|s| s.location[0])
                .collect();
            cuts.sort_by(f64::total_cmp);
            let mut pieces = Vec::with_capacity(cuts.len() + 1);
            let mut cursor = lo[0];
            for c in &cuts {
                pieces.push((cursor, *c));
                cursor = *c;
            }
            pieces.push((cursor, hi[0]));
            let segments = pieces.len();
            Ok(ManifoldSummary {
                dim: 1,
                singularities,
                segments,
                holes: 0,
                euler: segments as i64,
                boundary: BoundaryDescriptor::Interval { pieces },
            })
        }
        Domain::Disk { radius } => {
            let w = domain.width();
            let mut holes = 0;
            for s in &singularities {
                let r = s.location.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r > 1e-9 * w {
                    return Err(Error::UnsupportedDimension(
                        "planar singular points are only supported at the disk center".into(),
                    ));
                }
                match s.class {
                    SingularityClass::Flip => holes += 1,
                    SingularityClass::Removable => {}
                }
            }
            Ok(ManifoldSummary {
                dim: 2,
                singularities,
                segments: 1,
                holes,
                euler: 1 - holes as i64,
                boundary: BoundaryDescriptor::Disk { radius: *radius, holes },
            })
        }
        Domain::Box { lo, hi } if lo.len() == 2 => {
            if !singularities.is_empty() {
                return Err(Error::UnsupportedDimension(
                    "singular points inside a planar box domain are not supported".into(),
                ));
            }
            Ok(ManifoldSummary {
                dim: 2,
                singularities,
                segments: 1,
                holes: 0,
                euler: 1,
                boundary: BoundaryDescriptor::PlanarBox { lo: lo.clone(), hi: hi.clone() },
            })
        }
        _ => Err(Error::UnsupportedDimension(format!(
            "tube geometry supports dimensions 1 and 2, domain has {}",
            domain.dim()
        ))),
    }
}

/// Exclusion radius around one singular point: grid points closer than
/// this are unusable because the normalization degenerates there.
pub fn exclusion_radius(kernel: &CovarianceKernel, class: SingularityClass) -> f64 {
    let w = kernel.domain().width();
    match class {
        SingularityClass::Flip => EXCLUSION_FRACTION * w,
        SingularityClass::Removable => match kernel.strategy() {
            EvalStrategy::Quadrature => EXCLUSION_FRACTION_REMOVABLE_QUAD * w,
            _ => EXCLUSION_FRACTION * w,
        },
    }
}

/// Log of the kernel value, paired with the absolute rounding error the
/// logarithm inherits from the kernel evaluation.
fn log_cov(kernel: &CovarianceKernel, a: &ThetaProfile, b: &ThetaProfile) -> Result<(f64, f64)> {
    let (c, mag) = kernel.cov_p_scaled(a, b);
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Curvature(format!(
            "kernel not positive between {:?} and {:?}: {c:.6e}",
            a.theta(),
            b.theta()
        )));
    }
    Ok((c.ln(), DOT_REL_EPS * mag / c))
}

/// Zeroes a second-difference value that is indistinguishable from the
/// rounding noise of its inputs.
fn clamp_to_floor(value: f64, noise: f64, h: f64) -> f64 {
    if value.abs() <= NOISE_CLAMP * noise / (4.0 * h * h) {
        0.0
    } else {
        value
    }
}

/// Mixed second difference of `log C` along one direction, evaluated from
/// the two shifted profiles; this is one entry of the log-kernel Hessian.
fn stencil_same_axis(
    kernel: &CovarianceKernel,
    plus: &ThetaProfile,
    minus: &ThetaProfile,
    h: f64,
) -> Result<f64> {
    let (lpp, epp) = log_cov(kernel, plus, plus)?;
    let (lmm, emm) = log_cov(kernel, minus, minus)?;
    let (lpm, epm) = log_cov(kernel, plus, minus)?;
    let value = (lpp + lmm - 2.0 * lpm) / (4.0 * h * h);
    Ok(clamp_to_floor(value, epp + emm + 2.0 * epm, h))
}

fn shifted_dir(theta: &[f64], dir: &[f64], delta: f64) -> Vec<f64> {
    theta.iter().zip(dir).map(|(t, d)| t + delta * d).collect()
}

/// Curvature scalar for a one-dimensional kernel at `theta`.
fn g2_1d(kernel: &CovarianceKernel, theta: f64, h: f64) -> Result<f64> {
    let plus = kernel.profile(&[theta + h])?;
    let minus = kernel.profile(&[theta - h])?;
    stencil_same_axis(kernel, &plus, &minus, h)
}

/// Determinant of the log-kernel Hessian for a planar kernel at `theta`,
/// differenced along the orthonormal directions `e0` and `e1`. The
/// determinant does not depend on that frame, but aligning it with a
/// nearby singularity keeps the singular factor of the kernel cancelling
/// exactly inside each stencil instead of leaking truncation error.
fn det_g2_2d(
    kernel: &CovarianceKernel,
    theta: &[f64],
    h: f64,
    e0: &[f64],
    e1: &[f64],
) -> Result<f64> {
    let p0 = kernel.profile(&shifted_dir(theta, e0, h))?;
    let m0 = kernel.profile(&shifted_dir(theta, e0, -h))?;
    let p1 = kernel.profile(&shifted_dir(theta, e1, h))?;
    let m1 = kernel.profile(&shifted_dir(theta, e1, -h))?;
    let h00 = stencil_same_axis(kernel, &p0, &m0, h)?;
    let h11 = stencil_same_axis(kernel, &p1, &m1, h)?;
    let (lpp, epp) = log_cov(kernel, &p0, &p1)?;
    let (lpm, epm) = log_cov(kernel, &p0, &m1)?;
    let (lmp, emp) = log_cov(kernel, &m0, &p1)?;
    let (lmm, emm) = log_cov(kernel, &m0, &m1)?;
    let h01 = clamp_to_floor(
        (lpp - lpm - lmp + lmm) / (4.0 * h * h),
        epp + epm + emp + emm,
        h,
    );
    Ok(h00 * h11 - h01 * h01)
}

/// Distance from `theta` to the nearest singular point, infinite if none.
fn nearest_singularity(theta: &[f64], singularities: &[Singularity]) -> f64 {
    singularities
        .iter()
        .map(|s| {
            s.location
                .iter()
                .zip(theta)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Integrates a fallible integrand adaptively, excluding intervals, and
/// surfaces the first inner error.
fn integrate_checked(
    f: &dyn Fn(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    exclusions: &[(f64, f64)],
    spec: &QuadSpec,
) -> Result<f64> {
    let caught: RefCell<Option<Error>> = RefCell::new(None);
    let wrapped = |x: f64| -> f64 {
        match f(x) {
            Ok(v) => v,
            Err(e) => {
                caught.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let r = integrate_excluding(&wrapped, lo, hi, exclusions, spec)?;
    if let Some(e) = caught.into_inner() {
        return Err(e);
    }
    Ok(r.value)
}

/// Integration control for geometry integrals over a range of the given
/// width. The step floor stops refinement at the finite-difference noise
/// scale of the integrand, which is far coarser for quadrature-backed
/// kernels than for kernels evaluated in closed form or by discrete
/// summation.
fn geometry_quad_spec(kernel: &CovarianceKernel, width: f64) -> QuadSpec {
    let floor = match kernel.strategy() {
        EvalStrategy::Quadrature => 1e-3,
        _ => 1e-5,
    };
    QuadSpec { abs_tol: 1e-8, rel_tol: 1e-7, max_depth: 40, min_step: floor * width }
}

/// Volume of the manifold: the integral of the square root of the
/// log-kernel Hessian determinant over the domain, with singular points
/// excluded and the exclusion extrapolated to zero radius.
pub fn kappa0(kernel: &CovarianceKernel, manifold: &ManifoldSummary) -> Result<f64> {
    match &manifold.boundary {
        BoundaryDescriptor::Interval { .. } => kappa0_1d(kernel, manifold),
        BoundaryDescriptor::Disk { radius, .. } => kappa0_disk(kernel, manifold, *radius),
        BoundaryDescriptor::PlanarBox { lo, hi } => kappa0_box(kernel, lo, hi),
    }
}

fn kappa0_1d(kernel: &CovarianceKernel, manifold: &ManifoldSummary) -> Result<f64> {
    kappa0_1d_scaled(kernel, manifold, 1.0)
}

/// As `kappa0_1d`, with every exclusion radius multiplied by
/// `base_scale`; the extrapolated value must not depend on the scale.
pub(crate) fn kappa0_1d_scaled(
    kernel: &CovarianceKernel,
    manifold: &ManifoldSummary,
    base_scale: f64,
) -> Result<f64> {
    let (lo, hi) = kernel.domain().bounds();
    let (lo, hi) = (lo[0], hi[0]);
    let w = hi - lo;
    let h0 = FD_STEP_FRACTION * w;
    let sing = &manifold.singularities;
    let integrand = |theta: f64| -> Result<f64> {
        let h = h0.min(0.5 * nearest_singularity(&[theta], sing));
        let g2 = g2_1d(kernel, theta, h)?;
        Ok(g2.max(0.0).sqrt())
    };
    let spec = geometry_quad_spec(kernel, w);
    if sing.is_empty() {
        return integrate_checked(&integrand, lo, hi, &[], &spec);
    }
    let run = |scale: f64| -> Result<f64> {
        let excl: Vec<(f64, f64)> = sing
            .iter()
            .map(|s| {
                let eps = scale * base_scale * exclusion_radius(kernel, s.class);
                (s.location[0] - eps, s.location[0] + eps)
            })
            .collect();
        integrate_checked(&integrand, lo, hi, &excl, &spec)
    };
    // The integrand has a finite limit at the excluded points, so the
    // excluded mass is linear in the radius; extrapolate it away.
    let full = run(1.0)?;
    let half = run(0.5)?;
    Ok(2.0 * half - full)
}

fn kappa0_disk(kernel: &CovarianceKernel, manifold: &ManifoldSummary, radius: f64) -> Result<f64> {
    let w = kernel.domain().width();
    let h0 = FD_STEP_FRACTION * w;
    let sing = &manifold.singularities;
    // Integrate in polar coordinates; the ring integral uses the periodic
    // trapezoid rule, the radial integral is adaptive. The stencil frame
    // is radial and tangential so that a singular factor anchored at the
    // center cancels exactly inside each stencil.
    let ring = |r: f64| -> Result<f64> {
        let mut acc = 0.0;
        for j in 0..CIRCLE_NODES {
            let phi = 2.0 * PI * j as f64 / CIRCLE_NODES as f64;
            let (sin, cos) = phi.sin_cos();
            let theta = [r * cos, r * sin];
            let h = h0.min(0.5 * nearest_singularity(&theta, sing));
            let h = if h.is_finite() { h } else { h0 };
            let d = det_g2_2d(kernel, &theta, h, &[cos, sin], &[-sin, cos])?;
            acc += d.max(0.0).sqrt();
        }
        Ok(acc * (2.0 * PI / CIRCLE_NODES as f64) * r)
    };
    let spec = geometry_quad_spec(kernel, radius);
    if sing.is_empty() {
        return integrate_checked(&ring, 0.0, radius, &[(0.0, 1e-9 * w)], &spec);
    }
    let run = |scale: f64| -> Result<f64> {
        let eps = sing
            .iter()
            .map(|s| scale * exclusion_radius(kernel, s.class))
            .fold(0.0, f64::max);
        integrate_checked(&ring, 0.0, radius, &[(0.0, eps)], &spec)
    };
    let full = run(1.0)?;
    let half = run(0.5)?;
    Ok(2.0 * half - full)
}

fn kappa0_box(kernel: &CovarianceKernel, lo: &[f64], hi: &[f64]) -> Result<f64> {
    let w = kernel.domain().width();
    let h0 = FD_STEP_FRACTION * w;
    let (lx, hx) = (lo[0], hi[0]);
    let (ly, hy) = (lo[1], hi[1]);
    let spec = geometry_quad_spec(kernel, hx - lx);
    let mut inner_spec = geometry_quad_spec(kernel, hy - ly);
    inner_spec.abs_tol = 1e-9;
    inner_spec.rel_tol = 1e-8;
    let row = |x: f64| -> Result<f64> {
        let f = |y: f64| -> Result<f64> {
            let d = det_g2_2d(kernel, &[x, y], h0, &[1.0, 0.0], &[0.0, 1.0])?;
            Ok(d.max(0.0).sqrt())
        };
        integrate_checked(&f, ly, hy, &[], &inner_spec)
    };
    integrate_checked(&row, lx, hx, &[], &spec)
}

/// Boundary volume of the manifold.
///
/// In one dimension this counts endpoints: two per segment. In the plane
/// it integrates the speed of the boundary curves' images, and each flip
/// hole contributes a full turn.
pub fn ell0(kernel: &CovarianceKernel, manifold: &ManifoldSummary) -> Result<f64> {
    match &manifold.boundary {
        BoundaryDescriptor::Interval { .. } => Ok(2.0 * manifold.segments as f64),
        BoundaryDescriptor::Disk { radius, holes } => {
            let outer = curve_length(kernel, &|t| vec![radius * t.cos(), radius * t.sin()], 2.0 * PI)?;
            Ok(outer + 2.0 * PI * *holes as f64)
        }
        BoundaryDescriptor::PlanarBox { lo, hi } => {
            let (lx, hx) = (lo[0], hi[0]);
            let (ly, hy) = (lo[1], hi[1]);
            let mut total = 0.0;
            let edges: [Box<dyn Fn(f64) -> Vec<f64>>; 4] = [
                Box::new(move |t| vec![lx + t, ly]),
                Box::new(move |t| vec![lx + t, hy]),
                Box::new(move |t| vec![lx, ly + t]),
                Box::new(move |t| vec![hx, ly + t]),
            ];
            let lengths = [hx - lx, hx - lx, hy - ly, hy - ly];
            for (edge, len) in edges.iter().zip(lengths) {
                total += curve_length_adaptive(kernel, edge.as_ref(), len)?;
            }
            Ok(total)
        }
    }
}

/// Length of the image of a closed curve of period `period`, by the
/// periodic trapezoid rule on the restricted one-dimensional kernel.
fn curve_length(
    kernel: &CovarianceKernel,
    gamma: &dyn Fn(f64) -> Vec<f64>,
    period: f64,
) -> Result<f64> {
    let h = FD_STEP_FRACTION * period;
    let mut acc = 0.0;
    for j in 0..CIRCLE_NODES {
        let t = period * j as f64 / CIRCLE_NODES as f64;
        acc += curve_speed(kernel, gamma, t, h)?;
    }
    Ok(acc * period / CIRCLE_NODES as f64)
}

/// Length of the image of an open curve parameterized on `[0, len]`.
fn curve_length_adaptive(
    kernel: &CovarianceKernel,
    gamma: &dyn Fn(f64) -> Vec<f64>,
    len: f64,
) -> Result<f64> {
    let h = FD_STEP_FRACTION * len;
    let f = |t: f64| curve_speed(kernel, gamma, t, h);
    integrate_checked(&f, 0.0, len, &[], &geometry_quad_spec(kernel, len))
}

fn curve_speed(
    kernel: &CovarianceKernel,
    gamma: &dyn Fn(f64) -> Vec<f64>,
    t: f64,
    h: f64,
) -> Result<f64> {
    let plus = kernel.profile(&gamma(t + h))?;
    let minus = kernel.profile(&gamma(t - h))?;
    let g2 = stencil_same_axis(kernel, &plus, &minus, h)?;
    Ok(g2.max(0.0).sqrt())
}

/// Assembles the tube series coefficients from the manifold geometry.
pub fn tube_constants(kernel: &CovarianceKernel, manifold: &ManifoldSummary) -> Result<TubeConstants> {
    let k0 = kappa0(kernel, manifold)?;
    let l0 = ell0(kernel, manifold)?;
    if !(k0.is_finite() && l0.is_finite()) || k0 < -1e-9 || l0 < 0.0 {
        return Err(Error::Curvature(format!(
            "tube constants invalid: kappa0 = {k0}, ell0 = {l0}"
        )));
    }
    let k0 = k0.max(0.0);
    let zeta = match manifold.dim {
        1 => vec![k0, l0 / 2.0],
        2 => vec![
            k0,
            l0 / 2.0,
            (2.0 * PI * manifold.euler as f64 - k0) / (2.0 * PI),
        ],
        d => {
            return Err(Error::UnsupportedDimension(format!(
                "tube constants support dimensions 1 and 2, got {d}"
            )))
        }
    };
    Ok(TubeConstants { dim: manifold.dim, zeta, kappa0: k0, ell0: l0, euler: manifold.euler })
}

/// Survival function of a chi-square variable with 1, 2 or 3 degrees of
/// freedom, in closed form.
fn chi_square_sf(df: usize, x: f64) -> f64 {
    match df {
        1 => erfc((0.5 * x).sqrt()),
        2 => (-0.5 * x).exp(),
        3 => erfc((0.5 * x).sqrt()) + (2.0 * x / PI).sqrt() * (-0.5 * x).exp(),
        _ => unreachable!("series needs at most three degrees of freedom"),
    }
}

/// Surface area of the unit sphere in `R^t`.
fn sphere_area(t: usize) -> f64 {
    match t {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!("series needs at most three dimensions"),
    }
}

/// Tail probability of the supremum at threshold `c`, by the tube series,
/// clamped into [0, 1].
pub fn tail_probability(constants: &TubeConstants, c: f64) -> Result<f64> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Invalid(format!("threshold must be positive, got {c}")));
    }
    let d = constants.dim;
    let x = c * c;
    let mut p = 0.0;
    for (t, &z) in constants.zeta.iter().enumerate() {
        let df = d + 1 - t;
        p += z / sphere_area(df) * chi_square_sf(df, x);
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Threshold whose tube tail equals `alpha`, by bisection on [0.5, 10].
pub fn critical_value(constants: &TubeConstants, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::Invalid(format!("level must lie in (0, 0.5], got {alpha}")));
    }
    let mut lo = 0.5;
    let mut hi = 10.0;
    let f_lo = tail_probability(constants, lo)? - alpha;
    let f_hi = tail_probability(constants, hi)? - alpha;
    if f_lo < 0.0 || f_hi > 0.0 {
        return Err(Error::Bracket(format!(
            "no threshold in [0.5, 10] reaches level {alpha}: tail range [{:.3e}, {:.3e}]",
            f_hi + alpha,
            f_lo + alpha
        )));
    }
    while hi - lo > 1e-11 {
        let mid = 0.5 * (lo + hi);
        if tail_probability(constants, mid)? - alpha > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Full pipeline: singularities, topology, constants.
pub fn tube_analysis(
    kernel: &CovarianceKernel,
    declared: Option<&[Vec<f64>]>,
) -> Result<(ManifoldSummary, TubeConstants)> {
    let sing = detect_singularities(kernel, declared)?;
    let summary = manifold_summary(kernel, sing)?;
    let constants = tube_constants(kernel, &summary)?;
    Ok((summary, constants))
}
