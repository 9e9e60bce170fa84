//! Legendre–Fenchel conjugates of entropic functionals.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::renyi::{DomainKind, EntropicFunctional};

const CONVEXITY_TOL: f64 = 1e-9;
const EDGE_FRACTION: f64 = 1e-6;
const FLAT_TOL: f64 = 1e-12;

/// I(s) = sup_α (αs − ẽ(α)) with ẽ(α) = e(−α), continued linearly past the
/// range of ẽ′ reached inside the domain.
#[derive(Clone)]
pub struct RateFunction {
    pub kind: DomainKind,
    /// Open range of α for ẽ, i.e. the reflected domain of e.
    pub alpha_range: (f64, f64),
    /// (s⁻, s⁺): slopes of ẽ at the effective endpoints.
    pub inner_interval: (f64, f64),
    /// Slopes of the lower and upper linear tails.
    pub tail_slopes: (f64, f64),
    /// I(s) = slope·s + intercept on each tail.
    pub tail_intercepts: (f64, f64),
    pub minimizer: f64,
    pub degenerate: bool,
    /// Whether an effective endpoint was pulled inward because ẽ′ stops
    /// increasing near that edge of the range.
    pub truncated: (bool, bool),
    efn: Arc<EntropicFunctional>,
}

impl std::fmt::Debug for RateFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RateFunction")
            .field("kind", &self.kind)
            .field("alpha_range", &self.alpha_range)
            .field("inner_interval", &self.inner_interval)
            .field("tail_slopes", &self.tail_slopes)
            .field("minimizer", &self.minimizer)
            .field("degenerate", &self.degenerate)
            .field("truncated", &self.truncated)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateSummary {
    pub alpha_lower: f64,
    pub alpha_upper: f64,
    pub s_minus: f64,
    pub s_plus: f64,
    pub slope_lower: f64,
    pub slope_upper: f64,
    pub minimizer: f64,
    pub degenerate: bool,
    pub truncated_lower: bool,
    pub truncated_upper: bool,
}

pub fn rate_function(efn: &EntropicFunctional, kind: DomainKind) -> Result<RateFunction> {
    let dom = &efn.domain;
    if !(dom.lower < dom.upper) || !dom.contains(0.0) {
        return Err(Error::Invalid(format!("functional domain {dom} must be an open interval around 0")));
    }
    let grid = dom.interior_grid(101, 1e-3);
    efn.check_convex(&grid, CONVEXITY_TOL)?;
    let alpha_range = (-dom.upper, -dom.lower);
    let efn = Arc::new(efn.clone());
    let flat = grid.iter().all(|&a| efn.eval(a).abs() < FLAT_TOL);
    if flat {
        return Ok(RateFunction {
            kind,
            alpha_range,
            inner_interval: (0.0, 0.0),
            tail_slopes: alpha_range,
            tail_intercepts: (0.0, 0.0),
            minimizer: 0.0,
            degenerate: true,
            truncated: (false, false),
            efn,
        });
    }
    let len = if dom.is_bounded() { dom.length() } else { 1.0 };
    let eps = EDGE_FRACTION * len;
    let e_tilde = |a: f64| efn.eval(-a);
    let d_tilde = |a: f64| -efn.derivative(-a);
    let (mut s_minus, mut s_plus) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut slope_lo, mut slope_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut icpt_lo, mut icpt_hi) = (f64::NAN, f64::NAN);
    let mut truncated = (false, false);
    if alpha_range.0.is_finite() {
        let (a, cut) = effective_edge(&d_tilde, &grid, alpha_range.0, len, -1.0);
        s_minus = one_sided_slope(&e_tilde, a, eps, 1.0);
        slope_lo = a;
        icpt_lo = -e_tilde(a);
        truncated.0 = cut;
    }
    if alpha_range.1.is_finite() {
        let (a, cut) = effective_edge(&d_tilde, &grid, alpha_range.1, len, 1.0);
        s_plus = one_sided_slope(&e_tilde, a, eps, -1.0);
        slope_hi = a;
        icpt_hi = -e_tilde(a);
        truncated.1 = cut;
    }
    if !(s_minus < s_plus) {
        return Err(Error::Invalid("slope range of the functional is empty".into()));
    }
    let minimizer = d_tilde(0.0);
    Ok(RateFunction {
        kind,
        alpha_range,
        inner_interval: (s_minus, s_plus),
        tail_slopes: (slope_lo, slope_hi),
        tail_intercepts: (icpt_lo, icpt_hi),
        minimizer,
        degenerate: false,
        truncated,
        efn,
    })
}

/// Outermost point, walking from 0 toward the edge of ẽ's range on side `dir`,
/// up to which ẽ′ keeps increasing. The probe points are the convexity grid
/// followed by offsets from the edge shrinking by quarter decades to
/// `EDGE_FRACTION`·len. The flag is set when that point is not the last probe.
fn effective_edge(
    d_tilde: &impl Fn(f64) -> f64,
    grid: &[f64],
    edge: f64,
    len: f64,
    dir: f64,
) -> (f64, bool) {
    // grid is in the coordinates of e; ẽ(α) = e(−α).
    let mut probes: Vec<f64> = grid.iter().map(|&a| -a).filter(|&a| a * dir > 0.0).collect();
    probes.sort_by(|x, y| (x * dir).total_cmp(&(y * dir)));
    let outer = probes.last().copied().unwrap_or(0.0);
    let last_k = (-4.0 * EDGE_FRACTION.log10()).round() as i32;
    for k in 4..=last_k {
        let a = edge - dir * len * 10f64.powf(-k as f64 / 4.0);
        if a * dir > outer * dir {
            probes.push(a);
        }
    }
    let mut best = 0.0;
    let mut prev = d_tilde(0.0);
    for &a in &probes {
        let d = d_tilde(a);
        if !d.is_finite() || (d - prev) * dir < 0.0 {
            return (best, true);
        }
        best = a;
        prev = d;
    }
    (best, false)
}

/// Slope at `a` from points on the side `dir` (+1 right, −1 left) within distance h.
fn one_sided_slope(f: &impl Fn(f64) -> f64, a: f64, h: f64, dir: f64) -> f64 {
    let h = 0.5 * h;
    // Second-order one-sided stencil.
    dir * (-3.0 * f(a) + 4.0 * f(a + dir * h) - f(a + 2.0 * dir * h)) / (2.0 * h)
}

impl RateFunction {
    fn e_tilde(&self, a: f64) -> f64 {
        self.efn.eval(-a)
    }

    fn d_tilde(&self, a: f64) -> f64 {
        -self.efn.derivative(-a)
    }

    /// α solving ẽ′(α) = s for s in the inner interval.
    pub fn critical_alpha(&self, s: f64) -> Option<f64> {
        if self.degenerate || !(s >= self.inner_interval.0 && s <= self.inner_interval.1) {
            return None;
        }
        let (mut lo, mut hi) = self.bracket(s);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let d = self.d_tilde(mid) - s;
            if d.abs() <= 1e-12 * (1.0 + s.abs()) {
                return Some(mid);
            }
            if d < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    fn bracket(&self, s: f64) -> (f64, f64) {
        let (lo_edge, hi_edge) = self.tail_slopes;
        let mut lo = if lo_edge.is_finite() { lo_edge } else { -1.0 };
        let mut hi = if hi_edge.is_finite() { hi_edge } else { 1.0 };
        while !lo_edge.is_finite() && self.d_tilde(lo) > s && lo > -1e300 {
            lo *= 2.0;
        }
        while !hi_edge.is_finite() && self.d_tilde(hi) < s && hi < 1e300 {
            hi *= 2.0;
        }
        (lo, hi)
    }

    pub fn eval(&self, s: f64) -> f64 {
        if self.degenerate {
            let (a, b) = self.tail_slopes;
            return (a * s).max(b * s).max(0.0);
        }
        if s < self.inner_interval.0 {
            return self.tail_slopes.0 * s + self.tail_intercepts.0;
        }
        if s > self.inner_interval.1 {
            return self.tail_slopes.1 * s + self.tail_intercepts.1;
        }
        match self.critical_alpha(s) {
            Some(a) => (a * s - self.e_tilde(a)).max(0.0),
            None => f64::NAN,
        }
    }

    /// ẽ(α) − (αs − I(s)), nonnegative by Fenchel–Young.
    pub fn fenchel_young_gap(&self, alpha: f64, s: f64) -> f64 {
        self.e_tilde(alpha) - (alpha * s - self.eval(s))
    }

    pub fn summary(&self) -> RateSummary {
        RateSummary {
            alpha_lower: self.alpha_range.0,
            alpha_upper: self.alpha_range.1,
            s_minus: self.inner_interval.0,
            s_plus: self.inner_interval.1,
            slope_lower: self.tail_slopes.0,
            slope_upper: self.tail_slopes.1,
            minimizer: self.minimizer,
            degenerate: self.degenerate,
            truncated_lower: self.truncated.0,
            truncated_upper: self.truncated.1,
        }
    }
}

/// max over the grid of |I(−s) − I(s) − s|.
pub fn es_symmetry_defect(rate: &RateFunction, grid: &[f64]) -> f64 {
    grid.iter().map(|&s| (rate.eval(-s) - rate.eval(s) - s).abs()).fold(0.0, f64::max)
}

/// e″(at) by Richardson-extrapolated central differences with h = 1e-4·|domain|.
pub fn clt_variance(efn: &EntropicFunctional, at: f64) -> Result<f64> {
    let dom = &efn.domain;
    let len = if dom.is_bounded() { dom.length() } else { 1.0 };
    let h = 1e-4 * len;
    if !(at - 2.0 * h > dom.lower && at + 2.0 * h < dom.upper) {
        return Err(Error::Domain(format!("point {at} lacks a margin of {} inside {dom}", 2.0 * h)));
    }
    let f0 = efn.eval(at);
    let d2 = |h: f64| (efn.eval(at + h) - 2.0 * f0 + efn.eval(at - h)) / (h * h);
    Ok((4.0 * d2(0.5 * h) - d2(h)) / 3.0)
}
