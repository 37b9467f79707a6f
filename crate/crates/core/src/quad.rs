//! One-dimensional numerical integration.
//!
//! Two flavors are used throughout the crate. Adaptive Simpson is the
//! default for stand-alone integrals; it refines until a local error
//! estimate drops below tolerance. A composite fixed-node Gauss-Legendre
//! rule backs kernel evaluations that later get differenced: its nodes do
//! not depend on the integrand, so the evaluation error varies smoothly
//! with kernel arguments instead of jumping when an adaptive rule changes
//! its subdivision.

use crate::error::{Error, Result};

/// Tolerances for adaptive Simpson integration.
#[derive(Debug, Clone, Copy)]
pub struct QuadSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: u32,
    /// Panels are not subdivided below this width. Integrands built from
    /// finite differences carry a noise floor; refining past it cannot
    /// reduce the error and recurses without bound.
    pub min_step: f64,
}

impl Default for QuadSpec {
    fn default() -> Self {
        QuadSpec { abs_tol: 1e-9, rel_tol: 1e-7, max_depth: 48, min_step: 0.0 }
    }
}

/// Result of an adaptive integration, with the residual the last
/// subdivision level could not place below tolerance.
#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error_est: f64,
    /// Bound on mass ignored outside a truncated window, when the caller
    /// truncated an infinite support.
    pub tail_bound: f64,
}

/// Levels refined unconditionally before the error estimate is trusted;
/// shallow estimates can be deceptively small on symmetric integrands.
const MIN_DEPTH: u32 = 6;

struct Simpson<'a> {
    f: &'a dyn Fn(f64) -> f64,
    abs_tol: f64,
    rel_tol: f64,
    max_depth: u32,
    min_step: f64,
    worst: f64,
}

impl Simpson<'_> {
    fn recurse(&mut self, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = (self.f)(lm);
        let frm = (self.f)(rm);
        let h = b - a;
        let left = h / 12.0 * (fa + 4.0 * flm + fm);
        let right = h / 12.0 * (fm + 4.0 * frm + fb);
        let refined = left + right;
        let err = (refined - whole) / 15.0;
        let tol = self.abs_tol.max(self.rel_tol * refined.abs());
        let floor = self.min_step.max(1e-14 * (1.0 + m.abs()));
        if (err.abs() <= tol && depth >= MIN_DEPTH) || depth >= self.max_depth || h.abs() < floor {
            if err.abs() > tol {
                self.worst = self.worst.max(err.abs());
            }
            return refined + err;
        }
        // Children get half of the parent's absolute budget each.
        let saved = self.abs_tol;
        self.abs_tol = 0.5 * saved;
        let l = self.recurse(a, m, fa, flm, fm, left, depth + 1);
        let r = self.recurse(m, b, fm, frm, fb, right, depth + 1);
        self.abs_tol = saved;
        l + r
    }
}

/// Adaptive Simpson quadrature of `f` on `[lo, hi]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, spec: &QuadSpec) -> Result<QuadResult> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Quadrature(format!("nonfinite interval [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(QuadResult { value: 0.0, error_est: 0.0, tail_bound: 0.0 });
    }
    let fa = f(lo);
    let fb = f(hi);
    let m = 0.5 * (lo + hi);
    let fm = f(m);
    if !(fa.is_finite() && fb.is_finite() && fm.is_finite()) {
        return Err(Error::Quadrature(format!("integrand not finite on [{lo}, {hi}]")));
    }
    let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
    let mut s = Simpson {
        f,
        abs_tol: spec.abs_tol,
        rel_tol: spec.rel_tol,
        max_depth: spec.max_depth,
        min_step: spec.min_step,
        worst: 0.0,
    };
    let value = s.recurse(lo, hi, fa, fm, fb, whole, 0);
    if !value.is_finite() {
        return Err(Error::Quadrature("integral is not finite".into()));
    }
    let tail = 0.5 * (fa.abs() + fb.abs()) * (hi - lo).abs() * 1e-12;
    if s.worst > 1e3 * spec.abs_tol.max(spec.rel_tol * value.abs()) {
        return Err(Error::Quadrature(format!(
            "depth limit reached with residual {:.3e} on [{lo}, {hi}]",
            s.worst
        )));
    }
    Ok(QuadResult { value, error_est: s.worst, tail_bound: tail })
}

/// Integrates `f` over `[lo, hi]` minus a set of open exclusion intervals.
///
/// Exclusions are clipped to the domain and merged when they overlap; the
/// remaining closed intervals are integrated independently.
pub fn integrate_excluding(
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    exclusions: &[(f64, f64)],
    spec: &QuadSpec,
) -> Result<QuadResult> {
    let pieces = complement(lo, hi, exclusions);
    let mut total = QuadResult { value: 0.0, error_est: 0.0, tail_bound: 0.0 };
    for (a, b) in pieces {
        let r = integrate(f, a, b, spec)?;
        total.value += r.value;
        total.error_est += r.error_est;
        total.tail_bound += r.tail_bound;
    }
    Ok(total)
}

/// Closed subintervals of `[lo, hi]` left after removing the exclusions.
pub fn complement(lo: f64, hi: f64, exclusions: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut cuts: Vec<(f64, f64)> = exclusions
        .iter()
        .map(|&(a, b)| (a.max(lo), b.min(hi)))
        .filter(|&(a, b)| b > a)
        .collect();
    cuts.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for c in cuts {
        match merged.last_mut() {
            Some(last) if c.0 <= last.1 => last.1 = last.1.max(c.1),
            _ => merged.push(c),
        }
    }
    let mut out = Vec::new();
    let mut cursor = lo;
    for (a, b) in merged {
        if a > cursor {
            out.push((cursor, a));
        }
        cursor = cursor.max(b);
    }
    if hi > cursor {
        out.push((cursor, hi));
    }
    out
}

/// 16-point Gauss-Legendre abscissas and weights on [-1, 1].
const GL16: [(f64, f64); 16] = [
    (-0.9894009349916499326, 0.027152459411754094852),
    (-0.94457502307323257608, 0.062253523938647892863),
    (-0.86563120238783174388, 0.09515851168249278481),
    (-0.7554044083550030339, 0.12462897125553387205),
    (-0.61787624440264374845, 0.14959598881657673208),
    (-0.45801677765722738634, 0.16915651939500253819),
    (-0.28160355077925891323, 0.18260341504492358887),
    (-0.095012509837637440185, 0.18945061045506849629),
    (0.095012509837637440185, 0.18945061045506849629),
    (0.28160355077925891323, 0.18260341504492358887),
    (0.45801677765722738634, 0.16915651939500253819),
    (0.61787624440264374845, 0.14959598881657673208),
    (0.7554044083550030339, 0.12462897125553387205),
    (0.86563120238783174388, 0.09515851168249278481),
    (0.94457502307323257608, 0.062253523938647892863),
    (0.9894009349916499326, 0.027152459411754094852),
];

/// A fixed composite Gauss-Legendre grid on a window.
///
/// Kernel evaluations that feed finite differences use this rule so that
/// two evaluations at nearby arguments share the exact same nodes.
#[derive(Debug, Clone)]
pub struct FixedGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl FixedGrid {
    /// Builds a composite rule over `[lo, hi]` with panels of width at most
    /// `panel_width`.
    pub fn new(lo: f64, hi: f64, panel_width: f64) -> Self {
        assert!(hi > lo && panel_width > 0.0);
        let panels = ((hi - lo) / panel_width).ceil() as usize;
        let panels = panels.clamp(1, 4096);
        let w = (hi - lo) / panels as f64;
        let mut nodes = Vec::with_capacity(16 * panels);
        let mut weights = Vec::with_capacity(16 * panels);
        for p in 0..panels {
            let a = lo + p as f64 * w;
            let mid = a + 0.5 * w;
            for &(x, wt) in GL16.iter() {
                nodes.push(mid + 0.5 * w * x);
                weights.push(0.5 * w * wt);
            }
        }
        FixedGrid { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Quadrature of `f` against the stored weights.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}
