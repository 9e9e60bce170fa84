//! Finite-time Rényi entropy functionals e_t(α), e_{t+}(α) and their domains.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{flow_point, FlowPoint};
use crate::linalg::{cholesky_floored, cholesky_lower, congruence, eigvalsh, logdet_from_cholesky, Mat, Spectrum};
use crate::model::Model;

/// Relative pivot floor of the membership Cholesky.
pub const PIVOT_FLOOR: f64 = 1e-13;
/// Eigenvalues of K below this (relative to max(1, ‖K‖)) count as zero.
const ZERO_EIG: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Reference,
    Ness,
}

#[derive(Debug, Clone, Serialize)]
pub struct DomainInterval {
    pub lower: f64,
    pub upper: f64,
    pub kind: DomainKind,
    /// δ_t = −lower for the reference kind, NaN otherwise.
    pub delta_t: f64,
    pub symmetric: bool,
    pub notes: Vec<String>,
}

impl DomainInterval {
    pub fn whole_line(kind: DomainKind) -> Self {
        DomainInterval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            kind,
            delta_t: if kind == DomainKind::Reference { f64::INFINITY } else { f64::NAN },
            symmetric: true,
            notes: vec![],
        }
    }

    pub fn bounded(lower: f64, upper: f64, kind: DomainKind) -> Self {
        DomainInterval {
            lower,
            upper,
            kind,
            delta_t: if kind == DomainKind::Reference { -lower } else { f64::NAN },
            symmetric: (lower + upper - 1.0).abs() <= 1e-8 * (1.0 + upper.abs()),
            notes: vec![],
        }
    }

    pub fn contains(&self, alpha: f64) -> bool {
        alpha > self.lower && alpha < self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite()
    }

    /// Intersection with another interval of the same kind.
    pub fn intersect(&self, other: &DomainInterval) -> DomainInterval {
        let mut d = DomainInterval::bounded(self.lower.max(other.lower), self.upper.min(other.upper), self.kind);
        if !d.lower.is_finite() && d.kind == DomainKind::Reference {
            d.delta_t = f64::INFINITY;
        }
        d
    }

    /// `n` equally spaced points strictly inside, at fractional margin `margin` from the ends.
    pub fn interior_grid(&self, n: usize, margin: f64) -> Vec<f64> {
        let lo = if self.lower.is_finite() { self.lower } else { -10.0 };
        let hi = if self.upper.is_finite() { self.upper } else { 11.0 };
        let a = lo + margin * (hi - lo);
        let b = hi - margin * (hi - lo);
        if n == 1 {
            return vec![0.5 * (a + b)];
        }
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }
}

impl fmt::Display for DomainInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.10}, {:.10})", self.lower, self.upper)
    }
}

/// The symmetric pencil α ↦ I + sα K behind e_t (s = +1, K = Cᵀ T_t C) and
/// e_{t+} (s = −1, K = C₊ᵀ T_t C₊).
#[derive(Debug)]
pub struct RenyiPencil {
    kind: DomainKind,
    time: f64,
    /// ½ log det(I + D T_t).
    logdet_term: f64,
    dense: Option<Mat>,
    spectrum: OnceLock<Spectrum>,
    lazy_spectrum: Option<Spectrum>,
}

impl RenyiPencil {
    pub fn reference(fp: &FlowPoint) -> Result<Self> {
        let n = fp.model().dim();
        let (dense, spectrum) = if n <= crate::linalg::DENSE_SPECTRUM_LIMIT {
            (Some(fp.reference_operator().clone()), None)
        } else {
            (None, Some(fp.reference_spectrum()?.clone()))
        };
        Ok(RenyiPencil {
            kind: DomainKind::Reference,
            time: fp.time(),
            logdet_term: fp.logdet_term(),
            dense,
            spectrum: OnceLock::new(),
            lazy_spectrum: spectrum,
        })
    }

    pub fn ness(fp: &FlowPoint, d_plus: &Mat) -> Result<Self> {
        let n = fp.model().dim();
        crate::linalg::check_square(d_plus, n, "d_plus")?;
        let c = cholesky_lower(d_plus)?;
        let (dense, spectrum) = if n <= crate::linalg::DENSE_SPECTRUM_LIMIT {
            (Some(congruence(&c, fp.relative_t())), None)
        } else {
            (None, Some(fp.relative_spectrum(&c)?))
        };
        Ok(RenyiPencil {
            kind: DomainKind::Ness,
            time: fp.time(),
            logdet_term: fp.logdet_term(),
            dense,
            spectrum: OnceLock::new(),
            lazy_spectrum: spectrum,
        })
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// ½ log det(I + D T_t); zero under G4.
    pub fn logdet_term(&self) -> f64 {
        self.logdet_term
    }

    fn sign(&self) -> f64 {
        match self.kind {
            DomainKind::Reference => 1.0,
            DomainKind::Ness => -1.0,
        }
    }

    pub fn spectrum(&self) -> Result<&Spectrum> {
        if let Some(s) = self.spectrum.get() {
            return Ok(s);
        }
        let sp = match (&self.lazy_spectrum, &self.dense) {
            (Some(s), _) => s.clone(),
            (None, Some(k)) => Spectrum::dense(eigvalsh(k)?.to_vec()),
            (None, None) => unreachable!("pencil without operator"),
        };
        Ok(self.spectrum.get_or_init(|| sp))
    }

    fn significant(&self) -> Result<(f64, f64)> {
        let sp = self.spectrum()?;
        let scale = sp.min().abs().max(sp.max().abs()).max(1.0);
        let tol = ZERO_EIG * scale;
        let max = sp.values.iter().cloned().filter(|&m| m > tol).fold(0.0, f64::max);
        let min = sp.values.iter().cloned().filter(|&m| m < -tol).fold(0.0, f64::min);
        Ok((min, max))
    }

    /// Exact domain from the spectrum of K.
    pub fn domain(&self) -> Result<DomainInterval> {
        let (mu_min, mu_max) = self.significant()?;
        let s = self.sign();
        // 1 + sαμ > 0 for every eigenvalue μ.
        let (mut lower, mut upper) = (f64::NEG_INFINITY, f64::INFINITY);
        for mu in [mu_min, mu_max] {
            if mu == 0.0 {
                continue;
            }
            let edge = -1.0 / (s * mu);
            if s * mu > 0.0 {
                lower = lower.max(edge);
            } else {
                upper = upper.min(edge);
            }
        }
        if lower == f64::NEG_INFINITY && upper == f64::INFINITY {
            return Ok(DomainInterval::whole_line(self.kind));
        }
        let mut d = DomainInterval::bounded(lower, upper, self.kind);
        if self.kind == DomainKind::Reference {
            d.delta_t = if lower.is_finite() { -lower } else { f64::INFINITY };
            let rel = if upper.is_finite() && lower.is_finite() {
                ((1.0 + d.delta_t) - upper).abs() / upper.abs()
            } else {
                f64::INFINITY
            };
            d.symmetric = rel <= 1e-6;
            if !d.symmetric {
                d.notes.push(format!(
                    "J_t is not symmetric about 1/2 (relative defect {rel:.3e}): G4 fails, interval reported as computed"
                ));
            }
        } else {
            d.symmetric = false;
        }
        Ok(d)
    }

    /// Value by the spectrum: c α L₀ − ½ Σ log(1 + sαμ), +∞ outside the domain.
    pub fn value_spectral(&self, alpha: f64) -> Result<f64> {
        if alpha == 0.0 {
            return Ok(0.0);
        }
        let s = self.sign();
        let sp = self.spectrum()?;
        let mut acc = 0.0;
        for &mu in &sp.values {
            let arg = s * alpha * mu;
            if arg <= -1.0 {
                return Ok(f64::INFINITY);
            }
            acc += arg.ln_1p();
        }
        Ok(s * alpha * self.logdet_term - 0.5 * acc)
    }

    /// d/dα of the value inside the domain.
    pub fn derivative_spectral(&self, alpha: f64) -> Result<f64> {
        let s = self.sign();
        let sp = self.spectrum()?;
        let mut acc = 0.0;
        for &mu in &sp.values {
            acc += s * mu / (1.0 + s * alpha * mu);
        }
        Ok(s * self.logdet_term - 0.5 * acc)
    }

    /// Value with domain membership decided by Cholesky of I + sαK; α within
    /// 1e-10 of an endpoint, or with a marginal pivot, falls back to the eigenvalue test.
    pub fn value(&self, alpha: f64) -> Result<f64> {
        if alpha == 0.0 {
            return Ok(0.0);
        }
        let Some(k) = &self.dense else {
            return self.value_spectral(alpha);
        };
        let n = k.nrows();
        let mut m = k * (self.sign() * alpha);
        for i in 0..n {
            m[[i, i]] += 1.0;
        }
        let d = self.domain()?;
        let near_edge = (alpha - d.lower).abs() <= 1e-10 || (alpha - d.upper).abs() <= 1e-10;
        if !near_edge {
            if let Some(l) = cholesky_floored(&m, PIVOT_FLOOR) {
                return Ok(self.sign() * alpha * self.logdet_term - 0.5 * logdet_from_cholesky(&l));
            }
            if !d.contains(alpha) {
                return Ok(f64::INFINITY);
            }
        }
        self.value_spectral(alpha)
    }

    /// Cholesky membership verdict alone (no eigenvalue fallback).
    pub fn cholesky_member(&self, alpha: f64) -> Option<bool> {
        let k = self.dense.as_ref()?;
        let mut m = k * (self.sign() * alpha);
        for i in 0..k.nrows() {
            m[[i, i]] += 1.0;
        }
        Some(cholesky_floored(&m, PIVOT_FLOOR).is_some())
    }
}

pub fn domain_interval(model: &Model, t: f64) -> Result<DomainInterval> {
    RenyiPencil::reference(&flow_point(model, t)?)?.domain()
}

pub fn domain_interval_ness(model: &Model, t: f64, d_plus: &Mat) -> Result<DomainInterval> {
    RenyiPencil::ness(&flow_point(model, t)?, d_plus)?.domain()
}

/// e_t(α) = (α/2) log det(I + D T_t) − ½ log det(I + α D T_t).
pub fn renyi_entropy(model: &Model, t: f64, alpha: f64) -> Result<f64> {
    RenyiPencil::reference(&flow_point(model, t)?)?.value(alpha)
}

/// e_{t+}(α) = −(α/2) log det(I + D T_t) − ½ log det(I − α D₊ T_t).
pub fn renyi_entropy_ness(model: &Model, t: f64, alpha: f64, d_plus: &Mat) -> Result<f64> {
    RenyiPencil::ness(&flow_point(model, t)?, d_plus)?.value(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    FiniteTimeReference,
    FiniteTimeNess,
    Asymptotic,
    ClosedForm,
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A convex functional α ↦ e(α) on an open interval, +∞ outside.
#[derive(Clone)]
pub struct EntropicFunctional {
    pub domain: DomainInterval,
    pub meta: Provenance,
    value: ScalarFn,
    derivative: Option<ScalarFn>,
}

impl fmt::Debug for EntropicFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EntropicFunctional")
            .field("domain", &self.domain)
            .field("meta", &self.meta)
            .finish()
    }
}

impl EntropicFunctional {
    pub fn new<F>(domain: DomainInterval, meta: Provenance, value: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        EntropicFunctional { domain, meta, value: Arc::new(value), derivative: None }
    }

    pub fn with_derivative<G>(mut self, derivative: G) -> Self
    where
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.derivative = Some(Arc::new(derivative));
        self
    }

    /// Built from a pencil, evaluated spectrally.
    pub fn from_pencil(pencil: Arc<RenyiPencil>) -> Result<Self> {
        let domain = pencil.domain()?;
        let meta = match pencil.kind() {
            DomainKind::Reference => Provenance::FiniteTimeReference,
            DomainKind::Ness => Provenance::FiniteTimeNess,
        };
        let p1 = pencil.clone();
        let p2 = pencil;
        Ok(EntropicFunctional::new(domain, meta, move |a| p1.value_spectral(a).unwrap_or(f64::NAN))
            .with_derivative(move |a| p2.derivative_spectral(a).unwrap_or(f64::NAN)))
    }

    pub fn eval(&self, alpha: f64) -> f64 {
        if !self.domain.contains(alpha) {
            return f64::INFINITY;
        }
        (self.value)(alpha)
    }

    /// e′(α): analytic when supplied, else Richardson-extrapolated central differences.
    pub fn derivative(&self, alpha: f64) -> f64 {
        if let Some(d) = &self.derivative {
            return d(alpha);
        }
        let span = if self.domain.is_bounded() { self.domain.length() } else { 1.0 };
        let room = (alpha - self.domain.lower).min(self.domain.upper - alpha);
        let h = (1e-4 * span).min(0.25 * room);
        let d = |h: f64| (self.eval(alpha + h) - self.eval(alpha - h)) / (2.0 * h);
        (4.0 * d(0.5 * h) - d(h)) / 3.0
    }

    pub fn has_analytic_derivative(&self) -> bool {
        self.derivative.is_some()
    }

    /// α ↦ c·e(α) on the same domain.
    pub fn scaled(&self, c: f64) -> Self {
        let v = self.value.clone();
        let d = self.derivative.clone();
        EntropicFunctional {
            domain: self.domain.clone(),
            meta: self.meta,
            value: Arc::new(move |a| c * v(a)),
            derivative: d.map(|d| Arc::new(move |a| c * d(a)) as ScalarFn),
        }
    }

    /// Same values on a smaller domain.
    pub fn restricted(&self, domain: DomainInterval) -> Self {
        let mut out = self.clone();
        out.domain = self.domain.intersect(&domain);
        out.domain.kind = domain.kind;
        out
    }

    /// Most negative second difference on `grid` (uniform spacing assumed), with the offending triple.
    pub fn convexity_defect(&self, grid: &[f64]) -> (f64, Option<[f64; 3]>) {
        let mut worst = 0.0;
        let mut at = None;
        for w in grid.windows(3) {
            let d = self.eval(w[0]) - 2.0 * self.eval(w[1]) + self.eval(w[2]);
            if d < worst {
                worst = d;
                at = Some([w[0], w[1], w[2]]);
            }
        }
        (worst, at)
    }

    pub fn check_convex(&self, grid: &[f64], tol: f64) -> Result<()> {
        let (d, at) = self.convexity_defect(grid);
        if d < -tol {
            let [a, b, c] = at.expect("triple recorded");
            return Err(Error::NonConvex { a, b, c, defect: d });
        }
        Ok(())
    }
}
