//! Covariance and correlation kernels of the limiting score field.
//!
//! For a null density `f` and perturbation family `psi(.; theta)` the
//! basic kernel is
//!
//! ```text
//! C(a, b) = Int psi(x; a) psi(x; b) / f(x) dx - 1
//!         = Int (psi(x; a) - f(x)) (psi(x; b) - f(x)) / f(x) dx
//! ```
//!
//! The second form is used everywhere: near points where `psi(.; a)`
//! approaches `f` the first form subtracts two nearly equal numbers, while
//! the centered integrand keeps full relative accuracy.
//!
//! When null parameters are estimated, the kernel is adjusted by the
//! projection onto the null score directions,
//!
//! ```text
//! C*(a, b) = C(a, b) - c(a)' I^{-1} c(b),
//! ```
//!
//! with `c(theta) = Int psi(x; theta) grad log f(x) dx` and `I` the Fisher
//! information of the free null parameters. The adjustment is evaluated as
//! a difference of two dot products against the Cholesky factor of `I`,
//! which keeps `C*` symmetric and never above `C`.
//!
//! Evaluation strategy is picked per model: discrete supports are summed
//! exactly, single-component normal models use closed forms, and mixture
//! models integrate on a fixed composite Gauss-Legendre grid whose nodes
//! do not depend on the kernel arguments. The fixed grid matters because
//! geometry code differences kernel values at spacings of about 1e-4 of
//! the domain width; an adaptive rule re-subdivides between evaluations
//! and its error would not cancel in the difference.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{DensityFamily, Domain, Estimation, NullModel, PerturbationModel, Support};
use crate::quad::FixedGrid;

/// Margin past the outermost normal location kept in an integration
/// window; the standard normal density there is below 1e-16 of its peak.
const NORMAL_WINDOW_MARGIN: f64 = 8.5;

/// Which kernel of the score field to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Plain kernel `C`; null parameters treated as known.
    Fixed,
    /// Kernel `C*` adjusted for estimated null parameters.
    NuisanceAdjusted,
}

/// How base integrals are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStrategy {
    /// Exact summation over a finite observation support.
    DiscreteSum,
    /// Composite fixed-node Gauss-Legendre quadrature.
    Quadrature,
    /// Closed forms for a single-component normal null.
    NormalExact,
}

/// `exp(q) - 1 - q` with full relative accuracy for small `q`.
pub(crate) fn expm1_minus(q: f64) -> f64 {
    if q.abs() >= 0.1 {
        return q.exp_m1() - q;
    }
    // Taylor tail sum_{k >= 2} q^k / k!, factored around q^2 / 2.
    let mut term = 0.5 * q * q;
    let mut sum = term;
    for k in 3..=12 {
        term *= q / k as f64;
        sum += term;
    }
    sum
}

/// Precomputed arrays over the integration nodes.
struct Caches {
    /// Node coordinates (univariate).
    nodes: Vec<f64>,
    /// Quadrature weights, all ones for a discrete support.
    weights: Vec<f64>,
    /// Null density at each node.
    f: Vec<f64>,
    /// `sqrt(w / f)` at each node; centered profiles are scaled by this so
    /// kernel values become plain dot products.
    s: Vec<f64>,
    /// `w * grad log f` rows, one flat `n`-vector per free parameter.
    grad_w: Vec<Vec<f64>>,
}

/// Kernel values for one value of `theta`, cached so repeated pairings
/// reuse the per-node work.
pub struct ThetaProfile {
    theta: Vec<f64>,
    /// `(psi(x_i; theta) - f(x_i)) sqrt(w_i / f(x_i))` per node; empty for
    /// closed-form strategies.
    u: Vec<f64>,
    /// Cholesky-whitened nuisance covariance vector; empty when no
    /// adjustment applies.
    v: Vec<f64>,
    /// Componentwise bound on the rounding-error scale of `v`, in units of
    /// one rounding step. The sums producing `v` can run over terms much
    /// larger than their total, so their error does not shrink with `v`.
    verr: Vec<f64>,
}

impl ThetaProfile {
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
}

/// A covariance kernel bound to one model, with evaluation caches.
pub struct CovarianceKernel {
    null: NullModel,
    perturbation: DensityFamily,
    domain: Domain,
    kind: KernelKind,
    strategy: EvalStrategy,
    caches: Option<Caches>,
    /// Cholesky factor of the Fisher information of the free parameters.
    chol: Option<Cholesky<f64, Dyn>>,
    /// Whether the closed-form normal kernel subtracts the location
    /// adjustment.
    exact_adjusted: bool,
}

impl CovarianceKernel {
    /// Builds a kernel with an automatically chosen evaluation strategy.
    pub fn new(model: &PerturbationModel, kind: KernelKind) -> Result<Self> {
        let strategy = choose_strategy(model)?;
        Self::with_strategy(model, kind, strategy)
    }

    /// Builds a kernel with an explicit evaluation strategy; used mainly to
    /// compare strategies against each other.
    pub fn with_strategy(
        model: &PerturbationModel,
        kind: KernelKind,
        strategy: EvalStrategy,
    ) -> Result<Self> {
        if !model.null.family.same_family(&model.perturbation) {
            return Err(Error::Invalid(
                "kernel evaluation requires the null components and the perturbation to share a family".into(),
            ));
        }
        let mut kernel = CovarianceKernel {
            null: model.null.clone(),
            perturbation: model.perturbation.clone(),
            domain: model.domain.clone(),
            kind,
            strategy,
            caches: None,
            chol: None,
            exact_adjusted: false,
        };
        match strategy {
            EvalStrategy::NormalExact => {
                if kernel.null.mixing.len() != 1 {
                    return Err(Error::Invalid(
                        "closed-form normal kernels require a single-component null".into(),
                    ));
                }
                kernel.exact_adjusted = kind == KernelKind::NuisanceAdjusted
                    && kernel.null.estimation == Estimation::Full;
            }
            EvalStrategy::DiscreteSum | EvalStrategy::Quadrature => {
                let caches = build_caches(&kernel.null, &kernel.perturbation, &kernel.domain, strategy)?;
                if kind == KernelKind::NuisanceAdjusted && kernel.null.free_param_count() > 0 {
                    let info = fisher_from_caches(&caches);
                    let chol = Cholesky::new(info).ok_or_else(|| {
                        Error::SingularInformation(
                            "Fisher information of the null parameters is not positive definite".into(),
                        )
                    })?;
                    kernel.chol = Some(chol);
                }
                kernel.caches = Some(caches);
            }
        }
        Ok(kernel)
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn strategy(&self) -> EvalStrategy {
        self.strategy
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn null(&self) -> &NullModel {
        &self.null
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Precomputes per-node values for one `theta`.
    pub fn profile(&self, theta: &[f64]) -> Result<ThetaProfile> {
        if theta.len() != self.perturbation.param_dim() {
            return Err(Error::ParameterDomain(format!(
                "theta has dimension {}, expected {}",
                theta.len(),
                self.perturbation.param_dim()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::ParameterDomain("theta is not finite".into()));
        }
        match self.strategy {
            EvalStrategy::NormalExact => Ok(ThetaProfile {
                theta: theta.to_vec(),
                u: Vec::new(),
                v: Vec::new(),
                verr: Vec::new(),
            }),
            _ => {
                let caches = self.caches.as_ref().expect("caches exist for summed strategies");
                let n = caches.nodes.len();
                let mut u = Vec::with_capacity(n);
                for i in 0..n {
                    let x = [caches.nodes[i]];
                    u.push(self.null.centered_from(theta, &x) * caches.s[i]);
                }
                let (v, verr) = match (&self.chol, self.kind) {
                    (Some(chol), KernelKind::NuisanceAdjusted) => {
                        let k = caches.grad_w.len();
                        let mut c = DVector::zeros(k);
                        let mut cerr = vec![0.0; k];
                        for (r, row) in caches.grad_w.iter().enumerate() {
                            let mut acc = 0.0;
                            let mut abs = 0.0;
                            for i in 0..n {
                                // psi = f + centered; centered is u / s.
                                let psi = caches.f[i]
                                    + if caches.s[i] > 0.0 { u[i] / caches.s[i] } else { 0.0 };
                                acc += row[i] * psi;
                                abs += (row[i] * psi).abs();
                            }
                            c[r] = acc;
                            cerr[r] = abs;
                        }
                        let sol = chol.l().solve_lower_triangular(&c).ok_or_else(|| {
                            Error::SingularInformation("Cholesky solve failed".into())
                        })?;
                        // Forward-substitute the error scales through the
                        // entrywise-absolute factor; this bounds |L^-1| e.
                        let l = chol.l();
                        let mut yerr = vec![0.0; k];
                        for r in 0..k {
                            let mut acc = cerr[r];
                            for j in 0..r {
                                acc += l[(r, j)].abs() * yerr[j];
                            }
                            yerr[r] = acc / l[(r, r)];
                        }
                        (sol.iter().copied().collect(), yerr)
                    }
                    _ => (Vec::new(), Vec::new()),
                };
                Ok(ThetaProfile { theta: theta.to_vec(), u, v, verr })
            }
        }
    }

    /// Kernel value from two precomputed profiles.
    pub fn cov_p(&self, a: &ThetaProfile, b: &ThetaProfile) -> f64 {
        self.cov_p_scaled(a, b).0
    }

    /// Kernel value together with the magnitude that sets its rounding
    /// error. The closed normal forms are evaluated without cancellation,
    /// so their own size is the scale; the dot-product path subtracts two
    /// sums whose sizes bound the error of the difference.
    pub(crate) fn cov_p_scaled(&self, a: &ThetaProfile, b: &ThetaProfile) -> (f64, f64) {
        match self.strategy {
            EvalStrategy::NormalExact => {
                let lam = &self.null.mixing.points()[0];
                let q: f64 = a
                    .theta
                    .iter()
                    .zip(&b.theta)
                    .zip(lam)
                    .map(|((&ta, &tb), &l)| (ta - l) * (tb - l))
                    .sum();
                let v = if self.exact_adjusted {
                    expm1_minus(q)
                } else {
                    q.exp_m1()
                };
                (v, v.abs())
            }
            _ => {
                let mut base = 0.0;
                let mut mag = 0.0;
                for (x, y) in a.u.iter().zip(&b.u) {
                    base += x * y;
                    mag += (x * y).abs();
                }
                let mut adj = 0.0;
                for r in 0..a.v.len() {
                    adj += a.v[r] * b.v[r];
                    mag += (a.v[r] * b.v[r]).abs();
                    mag += a.v[r].abs() * b.verr[r] + b.v[r].abs() * a.verr[r];
                }
                (base - adj, mag)
            }
        }
    }

    /// Kernel value at a pair of parameter points.
    pub fn cov(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let pa = self.profile(a)?;
        let pb = self.profile(b)?;
        Ok(self.cov_p(&pa, &pb))
    }

    /// Kernel diagonal at one point.
    pub fn variance(&self, theta: &[f64]) -> Result<f64> {
        self.cov(theta, theta)
    }

    /// Correlation from precomputed profiles, clamped into [-1, 1].
    pub fn corr_p(&self, a: &ThetaProfile, b: &ThetaProfile) -> Result<f64> {
        let va = self.cov_p(a, a);
        let vb = self.cov_p(b, b);
        if !(va > 0.0 && vb > 0.0) || !va.is_finite() || !vb.is_finite() {
            return Err(Error::SingularDiagonal(format!(
                "kernel diagonal not positive: C(a,a) = {va:.3e}, C(b,b) = {vb:.3e}"
            )));
        }
        let c = self.cov_p(a, b) / (va * vb).sqrt();
        Ok(c.clamp(-1.0, 1.0))
    }

    /// Correlation of the field between two parameter points.
    pub fn corr(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let pa = self.profile(a)?;
        let pb = self.profile(b)?;
        self.corr_p(&pa, &pb)
    }
}

fn choose_strategy(model: &PerturbationModel) -> Result<EvalStrategy> {
    match (&model.null.family, &model.perturbation) {
        (DensityFamily::Binomial2, DensityFamily::Binomial2) => Ok(EvalStrategy::DiscreteSum),
        (DensityFamily::NormalUnivariate, DensityFamily::NormalUnivariate) => {
            if model.null.mixing.len() == 1 {
                Ok(EvalStrategy::NormalExact)
            } else {
                Ok(EvalStrategy::Quadrature)
            }
        }
        (DensityFamily::NormalMultivariate { .. }, DensityFamily::NormalMultivariate { .. }) => {
            if model.null.mixing.len() == 1 {
                Ok(EvalStrategy::NormalExact)
            } else {
                Err(Error::UnsupportedDimension(
                    "multivariate mixture nulls have no closed form and no quadrature support".into(),
                ))
            }
        }
        (DensityFamily::Exponential(_), DensityFamily::Exponential(_)) => Ok(EvalStrategy::Quadrature),
        _ => Err(Error::Invalid(
            "kernel evaluation requires the null components and the perturbation to share a family".into(),
        )),
    }
}

/// Integration window for a univariate quadrature kernel: the convex hull
/// of the domain, the null support points and the product-shift extremes,
/// padded in the normal case so neglected tails are below 1e-16.
fn quad_window(null: &NullModel, pert: &DensityFamily, domain: &Domain) -> Result<(f64, f64)> {
    match pert {
        DensityFamily::NormalUnivariate => {
            let (dlo, dhi) = domain.bounds();
            let (dlo, dhi) = (dlo[0], dhi[0]);
            let mut lam_lo = f64::INFINITY;
            let mut lam_hi = f64::NEG_INFINITY;
            for p in null.mixing.points() {
                lam_lo = lam_lo.min(p[0]);
                lam_hi = lam_hi.max(p[0]);
            }
            // The product psi(x; a) psi(x; b) / psi(x; lam) concentrates
            // near a + b - lam, so cover those shifts over the whole domain.
            let lo = dlo.min(lam_lo).min(2.0 * dlo - lam_hi) - NORMAL_WINDOW_MARGIN;
            let hi = dhi.max(lam_hi).max(2.0 * dhi - lam_lo) + NORMAL_WINDOW_MARGIN;
            Ok((lo, hi))
        }
        DensityFamily::Exponential(_) => match pert.support() {
            Support::Continuous { lo, hi } if lo.is_finite() && hi.is_finite() => Ok((lo, hi)),
            _ => Err(Error::Quadrature(
                "quadrature kernels for exponential families need a bounded observation support".into(),
            )),
        },
        _ => Err(Error::UnsupportedDimension(
            "quadrature kernels are univariate".into(),
        )),
    }
}

fn build_caches(
    null: &NullModel,
    pert: &DensityFamily,
    domain: &Domain,
    strategy: EvalStrategy,
) -> Result<Caches> {
    let (nodes, weights) = match strategy {
        EvalStrategy::DiscreteSum => match pert.support() {
            Support::Discrete(vals) => {
                let n = vals.len();
                (vals, vec![1.0; n])
            }
            _ => {
                return Err(Error::Invalid(
                    "discrete summation needs a finite observation support".into(),
                ))
            }
        },
        EvalStrategy::Quadrature => {
            let (lo, hi) = quad_window(null, pert, domain)?;
            // One unit panel keeps 16-node Gauss-Legendre at machine
            // accuracy for the unit-scale factors appearing here while
            // halving the node count relative to half-unit panels.
            let panel = ((hi - lo) / 8.0).min(1.0);
            let grid = FixedGrid::new(lo, hi, panel);
            (grid.nodes, grid.weights)
        }
        EvalStrategy::NormalExact => unreachable!("closed forms carry no caches"),
    };
    let n = nodes.len();
    let mut f = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for &x in &nodes {
        let fx = null.density(&[x])?;
        if !(fx > 0.0) || !fx.is_finite() {
            return Err(Error::Evaluation(format!(
                "null density is not positive at x = {x}"
            )));
        }
        f.push(fx);
    }
    for i in 0..n {
        s.push((weights[i] / f[i]).sqrt());
    }
    let k = null.free_param_count();
    let mut grad_w = vec![Vec::with_capacity(n); k];
    if k > 0 {
        for i in 0..n {
            let g = null.grad_log_free(&[nodes[i]])?;
            for (r, row) in grad_w.iter_mut().enumerate() {
                row.push(weights[i] * g[r]);
            }
        }
    }
    Ok(Caches { nodes, weights, f, s, grad_w })
}

/// Fisher information of the free null parameters from the caches:
/// `I[r][t] = sum_i w_i f_i gl_r(x_i) gl_t(x_i)`.
fn fisher_from_caches(caches: &Caches) -> DMatrix<f64> {
    let k = caches.grad_w.len();
    let n = caches.nodes.len();
    let mut info = DMatrix::zeros(k, k);
    for r in 0..k {
        for t in r..k {
            let mut acc = 0.0;
            for i in 0..n {
                // grad_w rows already carry one factor of w; divide it out
                // once so the product carries w * f * gl_r * gl_t.
                let w = caches.weights[i];
                if w > 0.0 {
                    acc += caches.grad_w[r][i] * caches.grad_w[t][i] * caches.f[i] / w;
                }
            }
            info[(r, t)] = acc;
            info[(t, r)] = acc;
        }
    }
    info
}

/// Plain kernel `C(a, b)` for the model, null parameters treated as fixed.
pub fn cov_fixed(model: &PerturbationModel, a: &[f64], b: &[f64]) -> Result<f64> {
    CovarianceKernel::new(model, KernelKind::Fixed)?.cov(a, b)
}

/// Adjusted kernel `C*(a, b)` accounting for estimated null parameters.
pub fn cov_nuisance(model: &PerturbationModel, a: &[f64], b: &[f64]) -> Result<f64> {
    CovarianceKernel::new(model, KernelKind::NuisanceAdjusted)?.cov(a, b)
}

/// Correlation of the limiting field between two points under the kernel
/// kind appropriate to the model's estimation mode.
pub fn corr(model: &PerturbationModel, kind: KernelKind, a: &[f64], b: &[f64]) -> Result<f64> {
    CovarianceKernel::new(model, kind)?.corr(a, b)
}

/// Covariance vector between the perturbation score at `theta` and the
/// null parameter scores, `c_r = Int psi(x; theta) gl_r(x) dx`.
pub fn cov_vector(model: &PerturbationModel, theta: &[f64]) -> Result<Vec<f64>> {
    let k = model.null.free_param_count();
    match choose_strategy(model)? {
        EvalStrategy::NormalExact => {
            // For a single normal component the only free parameters are
            // its location coordinates; the integral of x - lam against
            // psi(.; theta) is theta - lam.
            let lam = &model.null.mixing.points()[0];
            match model.null.estimation {
                Estimation::Full => Ok(theta.iter().zip(lam).map(|(&t, &l)| t - l).collect()),
                _ => Ok(vec![0.0; k]),
            }
        }
        strategy => {
            let caches = build_caches(&model.null, &model.perturbation, &model.domain, strategy)?;
            let n = caches.nodes.len();
            let mut out = Vec::with_capacity(caches.grad_w.len());
            for row in &caches.grad_w {
                let mut acc = 0.0;
                for i in 0..n {
                    let x = [caches.nodes[i]];
                    let psi = caches.f[i] + model.null.centered_from(theta, &x);
                    acc += row[i] * psi;
                }
                out.push(acc);
            }
            Ok(out)
        }
    }
}

/// Fisher information matrix of the free null parameters.
pub fn fisher_info(model: &PerturbationModel) -> Result<DMatrix<f64>> {
    let k = model.null.free_param_count();
    match choose_strategy(model)? {
        EvalStrategy::NormalExact => {
            // Unit-variance normal locations carry unit information per
            // coordinate.
            Ok(DMatrix::identity(k, k))
        }
        strategy => {
            let caches = build_caches(&model.null, &model.perturbation, &model.domain, strategy)?;
            Ok(fisher_from_caches(&caches))
        }
    }
}
