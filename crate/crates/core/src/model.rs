//! Model objects: density families, finite mixing distributions, null
//! models with their estimation mode, and the perturbation model that the
//! test is built around.
//!
//! The observed data follow `(1 - eta) f(x) + eta psi(x; theta0)` where
//! `f` is the null density (possibly a finite mixture of the same family)
//! and `psi(.; theta)` is the perturbation family indexed by `theta` in a
//! compact domain. All model objects are immutable once constructed.

use rand::Rng;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.39894228040143267794;

/// A parametric density family for both null components and perturbations.
#[derive(Debug, Clone)]
pub enum DensityFamily {
    /// Binomial with two trials and success probability `theta`, observed
    /// on {0, 1, 2}.
    Binomial2,
    /// Normal location family with unit variance.
    NormalUnivariate,
    /// Isotropic normal location family on `R^dim` with identity
    /// covariance.
    NormalMultivariate { dim: usize },
    /// A one-parameter exponential family in natural form,
    /// `psi(x; theta) = exp(theta x - cumulant(theta)) base(x)`.
    Exponential(ExpFamily),
}

/// Callbacks defining a custom scalar exponential family.
#[derive(Debug, Clone, Copy)]
pub struct ExpFamily {
    pub cumulant: fn(f64) -> f64,
    pub cumulant_d1: fn(f64) -> f64,
    pub cumulant_d2: fn(f64) -> f64,
    /// Log of the base density at `x`.
    pub log_base: fn(f64) -> f64,
    /// Draws one observation at natural parameter `theta`.
    pub sample: fn(f64, &mut dyn RngCore) -> f64,
    /// Observation support, finite when quadrature is intended.
    pub support: (f64, f64),
    /// Box of admissible natural parameter values.
    pub param_box: (f64, f64),
}

/// Observation support of a family.
#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    Discrete(Vec<f64>),
    Continuous { lo: f64, hi: f64 },
}

impl DensityFamily {
    /// Dimension of one observation.
    pub fn obs_dim(&self) -> usize {
        match self {
            DensityFamily::NormalMultivariate { dim } => *dim,
            _ => 1,
        }
    }

    /// Dimension of the parameter `theta`.
    pub fn param_dim(&self) -> usize {
        match self {
            DensityFamily::NormalMultivariate { dim } => *dim,
            _ => 1,
        }
    }

    pub fn support(&self) -> Support {
        match self {
            DensityFamily::Binomial2 => Support::Discrete(vec![0.0, 1.0, 2.0]),
            DensityFamily::NormalUnivariate | DensityFamily::NormalMultivariate { .. } => {
                Support::Continuous { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
            }
            DensityFamily::Exponential(e) => Support::Continuous { lo: e.support.0, hi: e.support.1 },
        }
    }

    /// Lower and upper corners of the admissible parameter box.
    pub fn param_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            DensityFamily::Binomial2 => (vec![0.0], vec![1.0]),
            DensityFamily::NormalUnivariate => (vec![f64::NEG_INFINITY], vec![f64::INFINITY]),
            DensityFamily::NormalMultivariate { dim } => {
                (vec![f64::NEG_INFINITY; *dim], vec![f64::INFINITY; *dim])
            }
            DensityFamily::Exponential(e) => (vec![e.param_box.0], vec![e.param_box.1]),
        }
    }

    pub fn name(&self) -> String {
        match self {
            DensityFamily::Binomial2 => "binomial2".into(),
            DensityFamily::NormalUnivariate => "normal".into(),
            DensityFamily::NormalMultivariate { dim } => format!("normal{dim}"),
            DensityFamily::Exponential(_) => "exponential".into(),
        }
    }

    /// True when the two values describe the same family (used to decide
    /// whether a perturbation can coincide with a null component).
    pub fn same_family(&self, other: &DensityFamily) -> bool {
        match (self, other) {
            (DensityFamily::Binomial2, DensityFamily::Binomial2) => true,
            (DensityFamily::NormalUnivariate, DensityFamily::NormalUnivariate) => true,
            (DensityFamily::NormalMultivariate { dim: a }, DensityFamily::NormalMultivariate { dim: b }) => a == b,
            (DensityFamily::Exponential(a), DensityFamily::Exponential(b)) => {
                std::ptr::fn_addr_eq(a.cumulant, b.cumulant)
            }
            _ => false,
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::ParameterDomain(format!(
                "theta has dimension {}, family {} expects {}",
                theta.len(),
                self.name(),
                self.param_dim()
            )));
        }
        let (lo, hi) = self.param_box();
        for (k, &t) in theta.iter().enumerate() {
            if !t.is_finite() || t < lo[k] || t > hi[k] {
                return Err(Error::ParameterDomain(format!(
                    "theta[{k}] = {t} outside [{}, {}]",
                    lo[k], hi[k]
                )));
            }
        }
        Ok(())
    }

    /// Requires `theta` strictly inside the parameter box, as null
    /// component locations must be.
    pub fn check_interior(&self, theta: &[f64]) -> Result<()> {
        self.check_theta(theta)?;
        let (lo, hi) = self.param_box();
        for (k, &t) in theta.iter().enumerate() {
            if t <= lo[k] || t >= hi[k] {
                return Err(Error::ParameterDomain(format!(
                    "null parameter coordinate {k} = {t} must be interior to ({}, {})",
                    lo[k], hi[k]
                )));
            }
        }
        Ok(())
    }

    fn check_obs(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.obs_dim() {
            return Err(Error::Evaluation(format!(
                "observation has dimension {}, family {} expects {}",
                x.len(),
                self.name(),
                self.obs_dim()
            )));
        }
        match self {
            DensityFamily::Binomial2 => {
                if !(x[0] == 0.0 || x[0] == 1.0 || x[0] == 2.0) {
                    return Err(Error::Evaluation(format!(
                        "binomial2 observation must be 0, 1 or 2, got {}",
                        x[0]
                    )));
                }
            }
            DensityFamily::Exponential(e) => {
                if x[0] < e.support.0 || x[0] > e.support.1 {
                    return Err(Error::Evaluation(format!(
                        "observation {} outside support [{}, {}]",
                        x[0], e.support.0, e.support.1
                    )));
                }
            }
            _ => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Evaluation("observation is not finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Density of one observation at parameter `theta`.
    pub fn density(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_obs(x)?;
        Ok(self.density_unchecked(theta, x))
    }

    pub(crate) fn density_unchecked(&self, theta: &[f64], x: &[f64]) -> f64 {
        match self {
            DensityFamily::Binomial2 => {
                let t = theta[0];
                match x[0] as u8 {
                    0 => (1.0 - t) * (1.0 - t),
                    1 => 2.0 * t * (1.0 - t),
                    _ => t * t,
                }
            }
            DensityFamily::NormalUnivariate => {
                let d = x[0] - theta[0];
                INV_SQRT_2PI * (-0.5 * d * d).exp()
            }
            DensityFamily::NormalMultivariate { dim } => {
                let mut q = 0.0;
                for k in 0..*dim {
                    let d = x[k] - theta[k];
                    q += d * d;
                }
                INV_SQRT_2PI.powi(*dim as i32) * (-0.5 * q).exp()
            }
            DensityFamily::Exponential(e) => {
                (theta[0] * x[0] - (e.cumulant)(theta[0]) + (e.log_base)(x[0])).exp()
            }
        }
    }

    /// `psi(x; theta) - psi(x; lambda)` evaluated in a form that keeps full
    /// relative accuracy as `theta` approaches `lambda`.
    pub(crate) fn density_diff(&self, theta: &[f64], lambda: &[f64], x: &[f64]) -> f64 {
        match self {
            DensityFamily::Binomial2 => {
                let (t, l) = (theta[0], lambda[0]);
                match x[0] as u8 {
                    0 => (l - t) * (2.0 - t - l),
                    1 => 2.0 * (t - l) * (1.0 - t - l),
                    _ => (t - l) * (t + l),
                }
            }
            DensityFamily::NormalUnivariate => {
                let a = (theta[0] - lambda[0]) * (x[0] - 0.5 * (theta[0] + lambda[0]));
                self.density_unchecked(lambda, x) * a.exp_m1()
            }
            DensityFamily::NormalMultivariate { dim } => {
                let mut a = 0.0;
                for k in 0..*dim {
                    a += (theta[k] - lambda[k]) * (x[k] - 0.5 * (theta[k] + lambda[k]));
                }
                self.density_unchecked(lambda, x) * a.exp_m1()
            }
            DensityFamily::Exponential(e) => {
                let a = (theta[0] - lambda[0]) * x[0]
                    - ((e.cumulant)(theta[0]) - (e.cumulant)(lambda[0]));
                self.density_unchecked(lambda, x) * a.exp_m1()
            }
        }
    }

    /// Gradient of `psi(x; theta)` with respect to `theta`.
    pub(crate) fn density_dtheta(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        match self {
            DensityFamily::Binomial2 => {
                let t = theta[0];
                vec![match x[0] as u8 {
                    0 => -2.0 * (1.0 - t),
                    1 => 2.0 - 4.0 * t,
                    _ => 2.0 * t,
                }]
            }
            DensityFamily::NormalUnivariate => {
                vec![(x[0] - theta[0]) * self.density_unchecked(theta, x)]
            }
            DensityFamily::NormalMultivariate { dim } => {
                let p = self.density_unchecked(theta, x);
                (0..*dim).map(|k| (x[k] - theta[k]) * p).collect()
            }
            DensityFamily::Exponential(e) => {
                vec![(x[0] - (e.cumulant_d1)(theta[0])) * self.density_unchecked(theta, x)]
            }
        }
    }

    /// Gradient of `log psi(x; theta)` with respect to `theta`.
    pub fn grad_log(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        self.check_obs(x)?;
        Ok(match self {
            DensityFamily::Binomial2 => {
                let t = theta[0];
                vec![x[0] / t - (2.0 - x[0]) / (1.0 - t)]
            }
            DensityFamily::NormalUnivariate => vec![x[0] - theta[0]],
            DensityFamily::NormalMultivariate { dim } => {
                (0..*dim).map(|k| x[k] - theta[k]).collect()
            }
            DensityFamily::Exponential(e) => vec![x[0] - (e.cumulant_d1)(theta[0])],
        })
    }

    /// Maximum likelihood parameter for a (weighted) sample mean, the exact
    /// M step of EM for these families.
    pub(crate) fn param_from_mean(&self, mean: &[f64]) -> Result<Vec<f64>> {
        match self {
            DensityFamily::Binomial2 => {
                let t = (mean[0] / 2.0).clamp(1e-9, 1.0 - 1e-9);
                Ok(vec![t])
            }
            DensityFamily::NormalUnivariate | DensityFamily::NormalMultivariate { .. } => {
                Ok(mean.to_vec())
            }
            DensityFamily::Exponential(e) => {
                // Solve cumulant'(theta) = mean by Newton iteration; the
                // cumulant is convex so the iteration is monotone once
                // bracketed.
                let (lo, hi) = e.param_box;
                let mut t = 0.5 * (lo + hi);
                for _ in 0..100 {
                    let g = (e.cumulant_d1)(t) - mean[0];
                    let h = (e.cumulant_d2)(t);
                    if h <= 0.0 || !h.is_finite() {
                        return Err(Error::Evaluation("cumulant second derivative not positive".into()));
                    }
                    let step = g / h;
                    t = (t - step).clamp(lo + 1e-12, hi - 1e-12);
                    if step.abs() < 1e-14 * (1.0 + t.abs()) {
                        break;
                    }
                }
                Ok(vec![t])
            }
        }
    }

    /// Draws one observation at parameter `theta`.
    pub(crate) fn sample_one(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            DensityFamily::Binomial2 => {
                let t = theta[0];
                let u: f64 = rng.gen();
                let p0 = (1.0 - t) * (1.0 - t);
                let p1 = p0 + 2.0 * t * (1.0 - t);
                vec![if u < p0 {
                    0.0
                } else if u < p1 {
                    1.0
                } else {
                    2.0
                }]
            }
            DensityFamily::NormalUnivariate => {
                let z: f64 = rng.sample(StandardNormal);
                vec![theta[0] + z]
            }
            DensityFamily::NormalMultivariate { dim } => (0..*dim)
                .map(|k| {
                    let z: f64 = rng.sample(StandardNormal);
                    theta[k] + z
                })
                .collect(),
            DensityFamily::Exponential(e) => vec![(e.sample)(theta[0], rng)],
        }
    }
}

/// A finite mixing distribution: support points with positive weights
/// summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingDistribution {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl MixingDistribution {
    /// Validates and builds a mixing distribution. Scalar support points
    /// must be strictly increasing; weights must be nonnegative and sum to
    /// one within 1e-12.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::Invalid(format!(
                "{} support points with {} weights",
                points.len(),
                weights.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::Invalid("support points must have positive dimension".into()));
        }
        for p in &points {
            if p.len() != dim || p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid("support points must be finite and share a dimension".into()));
            }
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("weights must be nonnegative and sum to 1, got sum {sum}")));
        }
        if dim == 1 {
            for w in points.windows(2) {
                if w[1][0] <= w[0][0] {
                    return Err(Error::Invalid(
                        "scalar support points must be strictly increasing".into(),
                    ));
                }
            }
        } else {
            for i in 0..points.len() {
                for j in (i + 1)..points.len() {
                    if points[i] == points[j] {
                        return Err(Error::Invalid("support points must be pairwise distinct".into()));
                    }
                }
            }
        }
        Ok(MixingDistribution { points, weights })
    }

    /// Point mass at a single parameter value.
    pub fn single(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Whether and how the null model is estimated from data before testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimation {
    /// All null parameters are known constants.
    Fixed,
    /// Mixing weights are estimated, support points stay fixed.
    Weights,
    /// Both weights and support points are estimated.
    Full,
}

impl Estimation {
    pub fn name(&self) -> &'static str {
        match self {
            Estimation::Fixed => "fixed",
            Estimation::Weights => "weights",
            Estimation::Full => "full",
        }
    }
}

/// The null model: a finite mixture over one density family together with
/// its estimation mode. A plain density is a one-point mixture.
#[derive(Debug, Clone)]
pub struct NullModel {
    pub family: DensityFamily,
    pub mixing: MixingDistribution,
    pub estimation: Estimation,
}

impl NullModel {
    pub fn new(family: DensityFamily, mixing: MixingDistribution, estimation: Estimation) -> Result<Self> {
        if mixing.dim() != family.param_dim() {
            return Err(Error::ParameterDomain(format!(
                "support points have dimension {}, family {} expects {}",
                mixing.dim(),
                family.name(),
                family.param_dim()
            )));
        }
        for p in mixing.points() {
            family.check_interior(p)?;
        }
        Ok(NullModel { family, mixing, estimation })
    }

    /// Fully specified single density `f(.; lambda)`.
    pub fn fixed(family: DensityFamily, lambda: Vec<f64>) -> Result<Self> {
        let mixing = MixingDistribution::single(lambda)?;
        Self::new(family, mixing, Estimation::Fixed)
    }

    /// Number of free parameters under the estimation mode, with the last
    /// weight eliminated by the sum constraint.
    pub fn free_param_count(&self) -> usize {
        let m = self.mixing.len();
        match self.estimation {
            Estimation::Fixed => 0,
            Estimation::Weights => m - 1,
            Estimation::Full => (m - 1) + m * self.family.param_dim(),
        }
    }

    /// Null mixture density at `x`.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        self.family.check_obs(x)?;
        Ok(self.density_unchecked(x))
    }

    pub(crate) fn density_unchecked(&self, x: &[f64]) -> f64 {
        self.mixing
            .points()
            .iter()
            .zip(self.mixing.weights())
            .map(|(p, &w)| w * self.family.density_unchecked(p, x))
            .sum()
    }

    /// `psi(x; theta) - f(x)` for a perturbation from the same family,
    /// written as a weight combination of pairwise differences so the
    /// cancellation near a support point costs no relative accuracy.
    pub(crate) fn centered_from(&self, theta: &[f64], x: &[f64]) -> f64 {
        self.mixing
            .points()
            .iter()
            .zip(self.mixing.weights())
            .map(|(p, &w)| w * self.family.density_diff(theta, p, x))
            .sum()
    }

    /// Gradient of `log f(x)` with respect to the free parameters, ordered
    /// as the first `m - 1` weights followed by the support point
    /// coordinates when those are estimated.
    pub fn grad_log_free(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.family.check_obs(x)?;
        let g = self.density_unchecked(x);
        if g <= 0.0 {
            return Err(Error::Evaluation(format!("null density vanishes at {x:?}")));
        }
        let m = self.mixing.len();
        let mut out = Vec::with_capacity(self.free_param_count());
        if matches!(self.estimation, Estimation::Weights | Estimation::Full) && m > 1 {
            let last = self.family.density_unchecked(&self.mixing.points()[m - 1], x);
            for j in 0..(m - 1) {
                let pj = self.family.density_unchecked(&self.mixing.points()[j], x);
                out.push((pj - last) / g);
            }
        }
        if self.estimation == Estimation::Full {
            for (p, &w) in self.mixing.points().iter().zip(self.mixing.weights()) {
                for d in self.family.density_dtheta(p, x) {
                    out.push(w * d / g);
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn sample_one(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = self.mixing.len() - 1;
        for (j, &w) in self.mixing.weights().iter().enumerate() {
            acc += w;
            if u < acc {
                idx = j;
                break;
            }
        }
        self.family.sample_one(&self.mixing.points()[idx], rng)
    }
}

/// The parameter region searched by the test.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// Axis-aligned box, any dimension.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Disk of given radius centered at the origin in the plane.
    Disk { radius: f64 },
}

impl Domain {
    /// One-dimensional interval.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new_box(vec![lo], vec![hi])
    }

    pub fn new_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Invalid("box corners must be nonempty and match".into()));
        }
        for k in 0..lo.len() {
            if !lo[k].is_finite() || !hi[k].is_finite() || lo[k] >= hi[k] {
                return Err(Error::Invalid(format!(
                    "box must satisfy lo < hi in every axis, got [{}, {}]",
                    lo[k], hi[k]
                )));
            }
        }
        Ok(Domain::Box { lo, hi })
    }

    pub fn disk(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Invalid(format!("disk radius must be positive, got {radius}")));
        }
        Ok(Domain::Disk { radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lo, .. } => lo.len(),
            Domain::Disk { .. } => 2,
        }
    }

    /// Largest extent across axes; scale reference for step sizes and
    /// exclusion radii.
    pub fn width(&self) -> f64 {
        match self {
            Domain::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| b - a)
                .fold(0.0, f64::max),
            Domain::Disk { radius } => 2.0 * radius,
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        if theta.len() != self.dim() {
            return false;
        }
        match self {
            Domain::Box { lo, hi } => theta
                .iter()
                .enumerate()
                .all(|(k, &t)| t >= lo[k] && t <= hi[k]),
            Domain::Disk { radius } => {
                theta.iter().map(|t| t * t).sum::<f64>() <= radius * radius
            }
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Box { lo, hi } => (lo.clone(), hi.clone()),
            Domain::Disk { radius } => (vec![-radius; 2], vec![*radius; 2]),
        }
    }
}

/// Null model, perturbation family, search domain and perturbation size.
#[derive(Debug, Clone)]
pub struct PerturbationModel {
    pub null: NullModel,
    pub perturbation: DensityFamily,
    pub domain: Domain,
    /// Mixing proportion of the perturbation when sampling under the
    /// alternative; zero under the null.
    pub eta: f64,
}

impl PerturbationModel {
    pub fn new(
        null: NullModel,
        perturbation: DensityFamily,
        domain: Domain,
        eta: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::ParameterDomain(format!("eta must lie in [0, 1], got {eta}")));
        }
        if domain.dim() != perturbation.param_dim() {
            return Err(Error::UnsupportedDimension(format!(
                "domain dimension {} does not match perturbation parameter dimension {}",
                domain.dim(),
                perturbation.param_dim()
            )));
        }
        if perturbation.obs_dim() != null.family.obs_dim() {
            return Err(Error::SupportViolation(
                "null and perturbation families observe different spaces".into(),
            ));
        }
        // The perturbation may not put mass where the null density is zero;
        // with interior null parameters this reduces to a support check.
        match (perturbation.support(), null.family.support()) {
            (Support::Discrete(a), Support::Discrete(b)) => {
                if !a.iter().all(|v| b.contains(v)) {
                    return Err(Error::SupportViolation(
                        "perturbation support is not contained in the null support".into(),
                    ));
                }
            }
            (Support::Continuous { lo: a0, hi: a1 }, Support::Continuous { lo: b0, hi: b1 }) => {
                if a0 < b0 || a1 > b1 {
                    return Err(Error::SupportViolation(
                        "perturbation support is not contained in the null support".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::SupportViolation(
                    "null and perturbation families have incompatible supports".into(),
                ));
            }
        }
        Ok(PerturbationModel { null, perturbation, domain, eta })
    }

    /// Density of the perturbed model at `x` for perturbation location
    /// `theta0`.
    pub fn density(&self, theta0: &[f64], x: &[f64]) -> Result<f64> {
        let f = self.null.density(x)?;
        let p = self.perturbation.density(theta0, x)?;
        Ok((1.0 - self.eta) * f + self.eta * p)
    }

    /// Draws `n` observations with the perturbation placed at `theta0`.
    /// The draw is a pure function of `(seed, n, theta0)`.
    pub fn sample(&self, theta0: &[f64], n: usize, seed: u64) -> Result<Dataset> {
        self.perturbation.check_theta(theta0)?;
        let mut rng = replicate_rng(seed, 0);
        self.sample_with(theta0, n, &mut rng)
    }

    /// Draws from an already positioned stream; used by replicated
    /// experiments so each replicate owns a stream.
    pub fn sample_with(&self, theta0: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Invalid("sample size must be positive".into()));
        }
        let dim = self.null.family.obs_dim();
        let mut rows = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let x = if u < self.eta {
                self.perturbation.sample_one(theta0, rng)
            } else {
                self.null.sample_one(rng)
            };
            rows.extend_from_slice(&x);
        }
        Dataset::new(dim, rows)
    }
}

/// A numeric dataset stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    rows: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows.is_empty() || rows.len() % dim != 0 {
            return Err(Error::Invalid(format!(
                "dataset of {} values is not a positive multiple of dimension {dim}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("dataset contains nonfinite values".into()));
        }
        Ok(Dataset { dim, rows })
    }

    pub fn univariate(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.dim)
    }

    /// Coordinate-wise sample mean.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.n() as f64;
        let mut m = vec![0.0; self.dim];
        for row in self.iter_rows() {
            for (k, &v) in row.iter().enumerate() {
                m[k] += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// RNG stream for one replicate of a seeded experiment. Replicate 0 is
/// also the stream used by single-shot sampling.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate.wrapping_add(1));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn normal() -> DensityFamily {
        DensityFamily::NormalUnivariate
    }

    #[test]
    fn normal_density_at_zero() {
        let v = normal().density(&[0.0], &[0.0]).unwrap();
        assert_abs_diff_eq!(v, 0.3989422804014327, epsilon = 1e-15);
    }

    #[test]
    fn binomial_densities_sum_to_one() {
        for t in [0.0, 0.1, 0.37, 0.5, 0.93, 1.0] {
            let s: f64 = [0.0, 1.0, 2.0]
                .iter()
                .map(|&x| DensityFamily::Binomial2.density(&[t], &[x]).unwrap())
                .sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn binomial_boundary_density() {
        let v = DensityFamily::Binomial2.density(&[1.0], &[0.0]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn binomial_rejects_fractional_observations() {
        assert!(DensityFamily::Binomial2.density(&[0.5], &[0.5]).is_err());
    }

    #[test]
    fn two_point_normal_mixture_density() {
        let mixing = MixingDistribution::new(vec![vec![-2.0], vec![2.0]], vec![0.5, 0.5]).unwrap();
        let null = NullModel::new(normal(), mixing, Estimation::Fixed).unwrap();
        let v = null.density(&[0.0]).unwrap();
        assert_abs_diff_eq!(v, 0.05399096651318806, epsilon = 1e-15);
    }

    #[test]
    fn binomial_mixture_density_at_two() {
        // Support {0, 1} with weights (0.3, 0.7): only the second component
        // can produce x = 2. Points must be interior, so use the exact
        // arithmetic on the family directly.
        let w = 0.3 * DensityFamily::Binomial2.density(&[0.0], &[2.0]).unwrap()
            + 0.7 * DensityFamily::Binomial2.density(&[1.0], &[2.0]).unwrap();
        assert_abs_diff_eq!(w, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn binomial_grad_log_vanishes_at_half() {
        let g = DensityFamily::Binomial2.grad_log(&[0.5], &[1.0]).unwrap();
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn grad_log_matches_finite_differences() {
        let fam = normal();
        let h = 1e-6;
        for (t, x) in [(0.3, 1.2), (-1.0, 0.4), (2.0, 2.0)] {
            let g = fam.grad_log(&[t], &[x]).unwrap()[0];
            let up = fam.density(&[t + h], &[x]).unwrap().ln();
            let dn = fam.density(&[t - h], &[x]).unwrap().ln();
            assert_abs_diff_eq!(g, (up - dn) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn density_diff_matches_direct_subtraction() {
        let fam = normal();
        let d = fam.density_diff(&[1.3], &[0.2], &[0.7]);
        let direct = fam.density_unchecked(&[1.3], &[0.7]) - fam.density_unchecked(&[0.2], &[0.7]);
        assert_abs_diff_eq!(d, direct, epsilon = 1e-15);
        let b = DensityFamily::Binomial2;
        for x in [0.0, 1.0, 2.0] {
            let d = b.density_diff(&[0.8], &[0.3], &[x]);
            let direct = b.density_unchecked(&[0.8], &[x]) - b.density_unchecked(&[0.3], &[x]);
            assert_abs_diff_eq!(d, direct, epsilon = 1e-15);
        }
    }

    #[test]
    fn mixing_distribution_validation() {
        assert!(MixingDistribution::new(vec![vec![1.0], vec![0.5]], vec![0.5, 0.5]).is_err());
        assert!(MixingDistribution::new(vec![vec![0.1], vec![0.5]], vec![0.7, 0.7]).is_err());
        assert!(MixingDistribution::new(vec![vec![0.1], vec![0.5]], vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn null_requires_interior_points() {
        let err = NullModel::fixed(DensityFamily::Binomial2, vec![1.0]);
        assert!(err.is_err());
    }

    #[test]
    fn sampling_is_reproducible_and_matches_moments() {
        let null = NullModel::fixed(DensityFamily::Binomial2, vec![0.4]).unwrap();
        let model = PerturbationModel::new(
            null,
            DensityFamily::Binomial2,
            Domain::interval(0.0, 1.0).unwrap(),
            0.2,
        )
        .unwrap();
        let a = model.sample(&[0.9], 100_000, 7).unwrap();
        let b = model.sample(&[0.9], 100_000, 7).unwrap();
        assert_eq!(a, b);
        // Mean of the mixture: 2 [(1 - eta) lambda + eta theta0].
        let want = 2.0 * (0.8 * 0.4 + 0.2 * 0.9);
        let sd = (2.0f64 * 0.5 * 0.5).sqrt();
        let se = sd / (100_000f64).sqrt();
        assert!((a.mean()[0] - want).abs() < 3.0 * se, "mean {} vs {}", a.mean()[0], want);
    }

    #[test]
    fn dataset_shape_checks() {
        assert!(Dataset::new(2, vec![1.0, 2.0, 3.0]).is_err());
        let d = Dataset::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.row(1), &[3.0, 4.0]);
    }
}
