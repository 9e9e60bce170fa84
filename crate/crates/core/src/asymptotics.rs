//! Large-time limits: NESS covariances, Q, the limiting functional and its atom measure.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{flow_point, BlockMatrix};
use crate::linalg::{
    cholesky_lower, eigh, eigvalsh, floor_spectrum, max_abs, max_abs_diff, spd_inverse, sym_sqrt, symmetrize,
    trace_product, Mat, Vector,
};
use crate::model::{Model, SigmaMatrix};
use crate::par::{default_workers, map_ordered};
use crate::renyi::{domain_interval_ness, DomainInterval, DomainKind, EntropicFunctional, Provenance, RenyiPencil};

/// Time points per parallel chunk of the Cesàro grid; fixed so results do not
/// depend on the worker count.
const CHUNK: usize = 16;

#[derive(Debug, Clone)]
pub struct LimitOptions {
    pub grid_points: usize,
    /// Take D₋ = θD₊θ when the model has a time reversal.
    pub minus_from_theta: bool,
    /// Number of grid times at which δ_t is sampled.
    pub delta_samples: usize,
    pub workers: usize,
}

impl Default for LimitOptions {
    fn default() -> Self {
        LimitOptions { grid_points: 65, minus_from_theta: true, delta_samples: 6, workers: default_workers() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitCovariances {
    #[serde(skip)]
    pub d_plus: Mat,
    #[serde(skip)]
    pub d_minus: Mat,
    pub window: (f64, f64),
    pub plateau_residual: f64,
    pub stationarity_defect: f64,
    /// max-abs(D₋ − θD₊θ) when D₋ was averaged independently.
    pub theta_defect: Option<f64>,
    /// (t, δ_t) samples inside the window.
    pub delta_series: Vec<(f64, f64)>,
    pub delta_bar: f64,
    pub notes: Vec<String>,
}

struct Averages {
    total: Mat,
    upto_3q: Mat,
    upto_7e: Mat,
}

/// Cesàro sums of D_t over `count` equally spaced times starting at t0.
fn cesaro_sums(model: &Model, t0: f64, h: f64, count: usize, marks: (usize, usize), workers: usize) -> Result<Averages> {
    let n = model.dim();
    let c = model.covariance_cholesky();
    let chunks = count.div_ceil(CHUNK);
    let step = BlockMatrix::exp_generator(model, h)?;
    let parts = map_ordered(chunks, workers, |ci| -> Result<Averages> {
        let k0 = ci * CHUNK;
        let k1 = (k0 + CHUNK).min(count);
        let start = BlockMatrix::exp_generator(model, t0 + k0 as f64 * h)?;
        let mut f = start.left(c, false);
        let mut acc = Averages { total: Mat::zeros((n, n)), upto_3q: Mat::zeros((n, n)), upto_7e: Mat::zeros((n, n)) };
        for k in k0..k1 {
            if k > k0 {
                f = step.left(&f, false);
            }
            let dt = f.dot(&f.t());
            acc.total += &dt;
            if k <= marks.0 {
                acc.upto_3q += &dt;
            }
            if k <= marks.1 {
                acc.upto_7e += &dt;
            }
        }
        Ok(acc)
    });
    let mut out = Averages { total: Mat::zeros((n, n)), upto_3q: Mat::zeros((n, n)), upto_7e: Mat::zeros((n, n)) };
    for p in parts {
        let p = p?;
        out.total += &p.total;
        out.upto_3q += &p.upto_3q;
        out.upto_7e += &p.upto_7e;
    }
    Ok(out)
}

fn average_window(model: &Model, lo: f64, hi: f64, opts: &LimitOptions) -> Result<(Mat, f64)> {
    let npts = opts.grid_points.max(64);
    let h = (hi - lo) / (npts - 1) as f64;
    let mark = |frac: f64| ((frac * (npts - 1) as f64).round() as usize).min(npts - 1);
    // Window end moves through the last half of [lo, hi]: 3/4 and 7/8 of the span.
    let marks = (mark(0.5), mark(0.75));
    let sums = cesaro_sums(model, lo, h, npts, marks, opts.workers)?;
    let avg = symmetrize(&(&sums.total / npts as f64));
    let a1 = &sums.upto_3q / (marks.0 + 1) as f64;
    let a2 = &sums.upto_7e / (marks.1 + 1) as f64;
    let residual = max_abs_diff(&a1, &avg).max(max_abs_diff(&a2, &avg));
    Ok((avg, residual))
}

pub fn estimate_limit_covariance(model: &Model, horizon: f64, tol: f64) -> Result<LimitCovariances> {
    estimate_limit_covariance_with(model, horizon, tol, &LimitOptions::default())
}

/// D₊ as the Cesàro average of D_t over [horizon/2, horizon].
pub fn estimate_limit_covariance_with(
    model: &Model,
    horizon: f64,
    tol: f64,
    opts: &LimitOptions,
) -> Result<LimitCovariances> {
    if !(horizon > 0.0) {
        return Err(Error::Invalid("horizon must be positive".into()));
    }
    let mut notes = Vec::new();
    let (lo, hi) = (0.5 * horizon, horizon);
    let (mut d_plus, mut residual) = average_window(model, lo, hi, opts)?;
    let floor = 0.5 * eigvalsh(model.covariance())?[0];
    let (fl, changed) = floor_spectrum(&d_plus, floor)?;
    if changed {
        notes.push(format!("D_+ projected to SPD by flooring eigenvalues at {floor:.3e}"));
        d_plus = fl;
    }
    let (d_minus, theta_defect) = match (model.time_reversal(), opts.minus_from_theta) {
        (Some(th), true) => (symmetrize(&th.dot(&d_plus).dot(th)), None),
        _ => {
            let (mut dm, r2) = average_window(model, -hi, -lo, opts)?;
            residual = residual.max(r2);
            let (fl, changed) = floor_spectrum(&dm, floor)?;
            if changed {
                notes.push(format!("D_- projected to SPD by flooring eigenvalues at {floor:.3e}"));
                dm = fl;
            }
            let td = model.time_reversal().map(|th| max_abs_diff(&dm, &th.dot(&d_plus).dot(th)));
            (dm, td)
        }
    };
    let l = model.generator();
    let stationarity_defect = max_abs(&(l.dot(&d_plus) + d_plus.dot(&l.t())));
    let mut delta_series = Vec::new();
    let samples = opts.delta_samples;
    for i in 0..samples {
        let t = if samples == 1 { hi } else { lo + (hi - lo) * i as f64 / (samples - 1) as f64 };
        let pencil = RenyiPencil::reference(&flow_point(model, t)?)?;
        delta_series.push((t, pencil.domain()?.delta_t));
    }
    let delta_bar = delta_series.iter().map(|p| p.1).fold(f64::NAN, f64::max);
    if residual > tol {
        return Err(Error::NonConvergence { residual, tol });
    }
    Ok(LimitCovariances {
        d_plus,
        d_minus,
        window: (lo, hi),
        plateau_residual: residual,
        stationarity_defect,
        theta_defect,
        delta_series,
        delta_bar,
        notes,
    })
}

impl LimitCovariances {
    /// Known limits, for models with analytic D_±.
    pub fn exact(model: &Model, d_plus: Mat, d_minus: Mat, delta_bar: f64) -> Self {
        let l = model.generator();
        let stationarity_defect = max_abs(&(l.dot(&d_plus) + d_plus.dot(&l.t())));
        LimitCovariances {
            d_plus,
            d_minus,
            window: (f64::INFINITY, f64::INFINITY),
            plateau_residual: 0.0,
            stationarity_defect,
            theta_defect: None,
            delta_series: vec![],
            delta_bar,
            notes: vec!["analytic limits".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SteadyEntropy {
    pub omega_plus: f64,
    pub omega_minus: Option<f64>,
    /// |ω₊ + ω₋| when ω₋ is available.
    pub antisymmetry_defect: Option<f64>,
}

/// ω₊(σ) = tr(ς(D₊ − D)), and ω₋(σ) when D₋ is supplied.
pub fn steady_entropy_production(sigma: &SigmaMatrix, d: &Mat, d_plus: &Mat, d_minus: Option<&Mat>) -> SteadyEntropy {
    let base = trace_product(&sigma.matrix, d);
    let omega_plus = trace_product(&sigma.matrix, d_plus) - base;
    let omega_minus = d_minus.map(|dm| trace_product(&sigma.matrix, dm) - base);
    SteadyEntropy {
        omega_plus,
        omega_minus,
        antisymmetry_defect: omega_minus.map(|m| (omega_plus + m).abs()),
    }
}

/// Q = D₋^{1/2}(D₋⁻¹ − D₊⁻¹)D₋^{1/2} with its eigendecomposition.
#[derive(Debug, Clone)]
pub struct QOperator {
    pub matrix: Mat,
    pub spectrum: Vector,
    pub vectors: Mat,
    pub weights_root: Mat,
    /// Largest violation of −1/δ̄ ≤ Q ≤ 1/(1+δ̄) (zero when inside).
    pub qspec_defect: f64,
    pub delta_bar: f64,
}

pub fn q_operator(lims: &LimitCovariances) -> Result<QOperator> {
    let root = sym_sqrt(&lims.d_minus)?;
    let dp_inv = spd_inverse(&lims.d_plus)?;
    let n = root.nrows();
    let matrix = symmetrize(&(Mat::eye(n) - root.dot(&dp_inv).dot(&root)));
    let (spectrum, vectors) = eigh(&matrix)?;
    let db = lims.delta_bar;
    let mut qspec_defect = 0.0_f64;
    if db.is_finite() && db > 0.0 {
        let lo = -1.0 / db;
        let hi = 1.0 / (1.0 + db);
        qspec_defect = (lo - spectrum[0]).max(spectrum[n - 1] - hi).max(0.0);
    }
    Ok(QOperator { matrix, spectrum, vectors, weights_root: root, qspec_defect, delta_bar: db })
}

/// Modal data (q_k, m_k) with m_k = v_kᵀ D₋^{1/2} ς D₋^{1/2} v_k.
#[derive(Debug, Clone)]
pub struct LimitFunctional {
    pub q: Vec<f64>,
    pub m: Vec<f64>,
}

impl LimitFunctional {
    pub fn new(q: &QOperator, sigma: &SigmaMatrix) -> Self {
        let w = q.weights_root.dot(&sigma.matrix).dot(&q.weights_root);
        let proj = q.vectors.t().dot(&w.dot(&q.vectors));
        LimitFunctional { q: q.spectrum.to_vec(), m: proj.diag().to_vec() }
    }

    pub fn domain(&self) -> DomainInterval {
        let qmin = self.q.iter().cloned().fold(0.0, f64::min);
        let qmax = self.q.iter().cloned().fold(0.0, f64::max);
        let lower = if qmin < 0.0 { 1.0 / qmin } else { f64::NEG_INFINITY };
        let upper = if qmax > 0.0 { 1.0 / qmax } else { f64::INFINITY };
        if lower.is_infinite() && upper.is_infinite() {
            return DomainInterval::whole_line(DomainKind::Reference);
        }
        DomainInterval::bounded(lower, upper, DomainKind::Reference)
    }

    /// e(α) = −Σ α g(αq_k) m_k, g(z) = log(1−z)/z.
    pub fn value(&self, alpha: f64) -> f64 {
        let mut acc = 0.0;
        for (&q, &m) in self.q.iter().zip(&self.m) {
            let z = alpha * q;
            if z >= 1.0 {
                return f64::INFINITY;
            }
            acc -= alpha * g(z) * m;
        }
        acc
    }

    /// e′(α) = Σ m_k/(1 − αq_k).
    pub fn derivative(&self, alpha: f64) -> f64 {
        self.q.iter().zip(&self.m).map(|(&q, &m)| m / (1.0 - alpha * q)).sum()
    }

    pub fn functional(self) -> EntropicFunctional {
        let domain = self.domain();
        let a = Arc::new(self);
        let b = a.clone();
        EntropicFunctional::new(domain, Provenance::Asymptotic, move |x| a.value(x))
            .with_derivative(move |x| b.derivative(x))
    }
}

fn g(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        -(1.0 + z / 2.0 + z * z / 3.0 + z * z * z / 4.0)
    } else {
        (-z).ln_1p() / z
    }
}

/// Intersection of the finite-time NESS domains J_t⁺ over the sampled times.
pub fn sampled_ness_domain(model: &Model, d_plus: &Mat, times: &[f64]) -> Result<DomainInterval> {
    let mut dom = DomainInterval::whole_line(DomainKind::Ness);
    for &t in times {
        dom = dom.intersect(&domain_interval_ness(model, t, d_plus)?);
        dom.kind = DomainKind::Ness;
    }
    Ok(dom)
}

/// The limiting functional on a NESS domain, where it coincides with e₊.
pub fn ness_limit_functional(limit: LimitFunctional, ness_domain: DomainInterval) -> EntropicFunctional {
    let f = limit.functional();
    let mut out = f.restricted(ness_domain);
    out.domain.kind = DomainKind::Ness;
    out.domain.delta_t = f64::NAN;
    out
}

pub fn e_limit(q: &QOperator, sigma: &SigmaMatrix, alpha: f64) -> f64 {
    LimitFunctional::new(q, sigma).value(alpha)
}

/// α tr(D₋(1−α) ς) with D₋(1−α) = (αD⁻¹ + (1−α)D₋⁻¹)⁻¹: an independent route to e(α).
pub fn e_limit_trace_form(model: &Model, lims: &LimitCovariances, alpha: f64) -> Result<f64> {
    let dm_inv = spd_inverse(&lims.d_minus)?;
    let mix = symmetrize(&(model.covariance_inverse() * alpha + dm_inv * (1.0 - alpha)));
    if cholesky_lower(&mix).is_err() {
        return Ok(f64::INFINITY);
    }
    let dmix = spd_inverse(&mix)?;
    Ok(alpha * trace_product(&dmix, &model.sigma().matrix))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Atom {
    pub r: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AtomMeasure {
    pub atoms: Vec<Atom>,
    pub dropped_mass: f64,
    pub warnings: Vec<String>,
}

impl AtomMeasure {
    /// e(α) = −Σ w_k log(1 − α/r_k).
    pub fn reconstruct(&self, alpha: f64) -> f64 {
        let mut acc = 0.0;
        for a in &self.atoms {
            let x = alpha / a.r;
            if x >= 1.0 {
                return f64::INFINITY;
            }
            acc -= a.w * (-x).ln_1p();
        }
        acc
    }

    /// Total weight and weight-averaged location of the atoms with r in [lo, hi].
    pub fn cluster(&self, lo: f64, hi: f64) -> (f64, f64) {
        let sel: Vec<&Atom> = self.atoms.iter().filter(|a| a.r >= lo && a.r <= hi).collect();
        let w: f64 = sel.iter().map(|a| a.w).sum();
        let loc = if w != 0.0 { sel.iter().map(|a| a.w * a.r).sum::<f64>() / w } else { f64::NAN };
        (w, loc)
    }
}

/// Atoms r_k = 1/q_k with weights m_k/q_k for |q_k| ≥ q_floor; eigenvalues
/// within 1e-6 of each other are merged.
pub fn spectral_measure_nu(q: &QOperator, sigma: &SigmaMatrix, q_floor: f64) -> AtomMeasure {
    let lf = LimitFunctional::new(q, sigma);
    let mut dropped_mass = 0.0;
    let mut groups: Vec<(f64, f64, usize)> = Vec::new(); // (Σq, Σm, count)
    let mut last_q = f64::NEG_INFINITY;
    for (&qk, &mk) in lf.q.iter().zip(&lf.m) {
        if qk.abs() < q_floor {
            dropped_mass += mk.abs();
            continue;
        }
        match groups.last_mut() {
            Some(g) if qk - last_q <= 1e-6 && (qk > 0.0) == (g.0 > 0.0) => {
                g.0 += qk;
                g.1 += mk;
                g.2 += 1;
            }
            _ => groups.push((qk, mk, 1)),
        }
        last_q = qk;
    }
    let atoms: Vec<Atom> = groups
        .into_iter()
        .filter(|g| g.1 != 0.0)
        .map(|(sq, sm, c)| {
            let qbar = sq / c as f64;
            Atom { r: 1.0 / qbar, w: sm / qbar }
        })
        .collect();
    let mut warnings = Vec::new();
    let limit = 1e-6 * sigma.trace_norm();
    if dropped_mass > limit {
        warnings.push(format!("dropped mass {dropped_mass:.3e} exceeds 1e-6 of the trace norm of sigma"));
    }
    AtomMeasure { atoms, dropped_mass, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn g_series_matches_closed_form() {
        for z in [1e-7, -3e-7, 2e-6, -0.4, 0.9] {
            let exact = (-z as f64).ln_1p() / z;
            assert!((g(z) - exact).abs() < 1e-12, "{z}");
        }
    }

    #[test]
    fn equal_limits_give_zero_q() {
        let l = arr2(&[[0.0, 1.0], [-1.0, 0.0]]);
        let m = Model::new(l, Mat::eye(2), None, "").unwrap();
        let lims = LimitCovariances::exact(&m, Mat::eye(2), Mat::eye(2), f64::INFINITY);
        let q = q_operator(&lims).unwrap();
        assert!(max_abs(&q.matrix) < 1e-15);
        let nu = spectral_measure_nu(&q, m.sigma(), 1e-8);
        assert!(nu.atoms.is_empty());
        assert_eq!(e_limit(&q, m.sigma(), 0.7), 0.0);
    }

    #[test]
    fn equilibrium_model_fixes_covariance() {
        // L = S D⁻¹ with S skew gives L D + D Lᵀ = 0.
        let d = arr2(&[[2.0, 0.5], [0.5, 1.0]]);
        let skew = arr2(&[[0.0, 1.0], [-1.0, 0.0]]);
        let l = skew.dot(&spd_inverse(&d).unwrap());
        let m = Model::new(l, d.clone(), None, "").unwrap();
        let opts = LimitOptions { delta_samples: 1, ..Default::default() };
        let lims = estimate_limit_covariance_with(&m, 20.0, 1e-8, &opts).unwrap();
        assert!(max_abs_diff(&lims.d_plus, &d) < 1e-10);
    }
}
