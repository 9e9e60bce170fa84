//! The model triple (L, D, θ), hypothesis checks, ς and reference perturbations.

use std::sync::{Arc, OnceLock};

use ndarray::Axis;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow;
use crate::linalg::{
    check_square, cholesky_lower, components, eigh, extreme_eigenvalues, max_abs, max_abs_diff, norm1,
    spd_inverse, symmetrize, trace, trace_product, Mat,
};

/// Tolerance for the algebraic θ relations.
pub const G4_TOL: f64 = 1e-10;

#[derive(Debug)]
struct Inner {
    generator: Mat,
    covariance: Mat,
    time_reversal: Option<Mat>,
    label: String,
    chol: Mat,
    d_inv: OnceLock<Mat>,
    sigma: OnceLock<SigmaMatrix>,
    sigma_factor: OnceLock<LowRankSym>,
    blocks: OnceLock<Vec<Vec<usize>>>,
}

/// A linear Gaussian dynamical system: generator L, reference covariance D,
/// optional time-reversal involution θ. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct Model {
    inner: Arc<Inner>,
}

impl Model {
    pub fn new(generator: Mat, covariance: Mat, time_reversal: Option<Mat>, label: impl Into<String>) -> Result<Self> {
        let n = generator.nrows();
        if n == 0 {
            return Err(Error::Structural("dimension must be positive".into()));
        }
        check_square(&generator, n, "generator")?;
        check_square(&covariance, n, "covariance")?;
        if let Some(th) = &time_reversal {
            check_square(th, n, "time_reversal")?;
        }
        if generator.iter().chain(covariance.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Structural("non-finite matrix entry".into()));
        }
        let scale = max_abs(&covariance);
        let asym = max_abs_diff(&covariance, &covariance.t().to_owned());
        if asym > 1e-12 * scale {
            return Err(Error::Structural(format!(
                "covariance is not symmetric (defect {asym:.3e})"
            )));
        }
        let covariance = symmetrize(&covariance);
        let chol = cholesky_lower(&covariance)
            .map_err(|_| Error::SingularCovariance("covariance is not positive definite".into()))?;
        if chol.diag().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::SingularCovariance("non-positive Cholesky pivot".into()));
        }
        Ok(Model {
            inner: Arc::new(Inner {
                generator,
                covariance,
                time_reversal,
                label: label.into(),
                chol,
                d_inv: OnceLock::new(),
                sigma: OnceLock::new(),
                sigma_factor: OnceLock::new(),
                blocks: OnceLock::new(),
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.inner.generator.nrows()
    }

    pub fn generator(&self) -> &Mat {
        &self.inner.generator
    }

    pub fn covariance(&self) -> &Mat {
        &self.inner.covariance
    }

    pub fn time_reversal(&self) -> Option<&Mat> {
        self.inner.time_reversal.as_ref()
    }

    pub fn label(&self) -> &str {
        &self.inner.label
    }

    /// Lower Cholesky factor of D.
    pub fn covariance_cholesky(&self) -> &Mat {
        &self.inner.chol
    }

    /// D⁻¹ from the Cholesky factorization.
    pub fn covariance_inverse(&self) -> &Mat {
        self.inner
            .d_inv
            .get_or_init(|| spd_inverse(&self.inner.covariance).expect("covariance validated as SPD"))
    }

    /// Index sets of the connected components of the generator's sparsity graph.
    pub fn generator_blocks(&self) -> &[Vec<usize>] {
        self.inner.blocks.get_or_init(|| components(&[self.inner.generator.view()]))
    }

    pub fn sigma(&self) -> &SigmaMatrix {
        self.inner.sigma.get_or_init(|| {
            let matrix = symmetrize(&self.covariance_inverse().dot(&self.inner.generator));
            let trace_d_sigma = trace_product(&self.inner.covariance, &matrix);
            SigmaMatrix { matrix, trace_d_sigma }
        })
    }

    /// ς = U diag(λ) Uᵀ restricted to its numerically nonzero eigenvalues.
    pub fn sigma_factor(&self) -> &LowRankSym {
        self.inner
            .sigma_factor
            .get_or_init(|| LowRankSym::new(&self.sigma().matrix).expect("symmetric eigensolver"))
    }

    /// Whether θ is present and satisfies the G4 relations.
    pub fn g4_holds(&self) -> bool {
        g4_defects(self).map(|d| d.ok()).unwrap_or(false)
    }
}

/// Truncated eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct LowRankSym {
    pub vectors: Mat,
    pub values: Vec<f64>,
}

impl LowRankSym {
    pub fn new(a: &Mat) -> Result<Self> {
        let (w, v) = eigh(a)?;
        let top = w.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let keep: Vec<usize> = (0..w.len()).filter(|&i| w[i].abs() > 1e-13 * top).collect();
        let vectors = v.select(Axis(1), &keep);
        let values = keep.iter().map(|&i| w[i]).collect();
        Ok(LowRankSym { vectors, values })
    }

    pub fn rank(&self) -> usize {
        self.values.len()
    }

    /// U diag(λ).
    pub fn scaled(&self) -> Mat {
        scale_columns(&self.vectors, &self.values)
    }
}

/// ς = ½(LᵀD⁻¹ + D⁻¹L) and tr(Dς).
#[derive(Debug, Clone)]
pub struct SigmaMatrix {
    pub matrix: Mat,
    pub trace_d_sigma: f64,
}

impl SigmaMatrix {
    pub fn is_zero(&self) -> bool {
        max_abs(&self.matrix) == 0.0
    }

    /// Sum of absolute eigenvalues.
    pub fn trace_norm(&self) -> f64 {
        crate::linalg::trace_norm_sym(&self.matrix).unwrap_or(f64::NAN)
    }
}

pub fn sigma_matrix(model: &Model) -> SigmaMatrix {
    model.sigma().clone()
}

/// Max-abs defects of the time-reversal relations.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct G4Defects {
    pub involution: f64,
    pub orthogonality: f64,
    pub anticommutes_generator: f64,
    pub commutes_covariance: f64,
    pub generator_trace: f64,
}

impl G4Defects {
    pub fn ok(&self) -> bool {
        self.involution <= G4_TOL
            && self.orthogonality <= G4_TOL
            && self.anticommutes_generator <= G4_TOL
            && self.commutes_covariance <= G4_TOL
            && self.generator_trace <= G4_TOL
    }
}

pub fn g4_defects(model: &Model) -> Option<G4Defects> {
    let th = model.time_reversal()?;
    let n = model.dim();
    let id = Mat::eye(n);
    let l = model.generator();
    let d = model.covariance();
    Some(G4Defects {
        involution: max_abs_diff(&th.dot(th), &id),
        orthogonality: max_abs_diff(&th.t().dot(th), &id),
        anticommutes_generator: max_abs(&(th.dot(l) + l.dot(th))),
        commutes_covariance: max_abs(&(th.dot(d) - d.dot(th))),
        generator_trace: trace(l).abs(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub g4_ok: bool,
    pub bounds: (f64, f64),
    pub delta: f64,
    pub g4_defects: Option<G4Defects>,
    pub notes: Vec<String>,
}

/// Spectral bounds of D_t over `time_grid` and the algebraic G4 relations.
/// Hypothesis failures are reported, never raised.
pub fn validate_model(model: &Model, time_grid: &[f64]) -> Result<HypothesisReport> {
    if time_grid.is_empty() {
        return Err(Error::Invalid("time grid is empty".into()));
    }
    if !time_grid.iter().any(|&t| t == 0.0) {
        return Err(Error::Invalid("time grid must include 0".into()));
    }
    let mut notes = Vec::new();
    let mut m_est = f64::INFINITY;
    let mut big_m = 0.0_f64;
    for &t in time_grid {
        let dt = flow::covariance_at(model, t)?;
        let (lo, hi) = extreme_eigenvalues(&dt)?;
        m_est = m_est.min(lo);
        big_m = big_m.max(hi);
    }
    if !(m_est > 0.0) {
        notes.push(format!("D_t lost positivity on the grid: m_est = {m_est:.3e}"));
    }
    let spread = big_m - m_est;
    let delta = if spread <= 1e-12 * big_m {
        notes.push("m_est = M_est: delta is infinite".into());
        f64::INFINITY
    } else {
        m_est / spread
    };
    let defects = g4_defects(model);
    let g4_ok = match &defects {
        None => {
            notes.push("no time reversal supplied: G4 not applicable".into());
            false
        }
        Some(d) => {
            if !d.ok() {
                notes.push(format!(
                    "G4 fails: involution {:.3e}, orthogonality {:.3e}, anticommutation {:.3e}, covariance commutation {:.3e}, tr L {:.3e}",
                    d.involution, d.orthogonality, d.anticommutes_generator, d.commutes_covariance, d.generator_trace
                ));
            }
            d.ok()
        }
    };
    Ok(HypothesisReport { g4_ok, bounds: (m_est, big_m), delta, g4_defects: defects, notes })
}

/// Replace D by (D⁻¹ + P)⁻¹, keeping L and θ.
pub fn perturb_reference(model: &Model, p: &Mat) -> Result<Model> {
    let n = model.dim();
    check_square(p, n, "perturbation")?;
    if max_abs_diff(p, &p.t().to_owned()) > 1e-12 * max_abs(p).max(1.0) {
        return Err(Error::Structural("perturbation is not symmetric".into()));
    }
    let h = symmetrize(&(model.covariance_inverse() + p));
    let (w, _) = eigh(&h)?;
    let floor = 1e-14 * norm1(&h);
    if w[0] <= floor {
        return Err(Error::Domain(format!(
            "D^-1 + P is not positive definite: most negative eigenvalue {:.17e}",
            w[0]
        )));
    }
    let cov = spd_inverse(&h)?;
    Model::new(
        model.generator().clone(),
        cov,
        model.time_reversal().cloned(),
        model.label().to_string(),
    )
}

/// Columns scaled by `w` (V diag(w)).
pub(crate) fn scale_columns(v: &Mat, w: &[f64]) -> Mat {
    let mut out = v.clone();
    for (j, mut c) in out.axis_iter_mut(Axis(1)).enumerate() {
        c *= w[j];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn rotation_model() -> Model {
        let l = arr2(&[[0.0, 1.0], [-1.0, 0.0]]);
        let th = arr2(&[[1.0, 0.0], [0.0, -1.0]]);
        Model::new(l, Mat::eye(2), Some(th), "rot").unwrap()
    }

    #[test]
    fn isometric_flow_report() {
        let m = rotation_model();
        let r = validate_model(&m, &[0.0, 0.5, 1.0, 3.0]).unwrap();
        assert!(r.g4_ok);
        assert!((r.bounds.0 - 1.0).abs() < 1e-12 && (r.bounds.1 - 1.0).abs() < 1e-12);
        assert!(r.delta.is_infinite());
        assert!(r.notes.iter().any(|n| n.contains("infinite")));
    }

    #[test]
    fn identity_theta_fails_g4() {
        let l = arr2(&[[0.0, 1.0], [-1.0, 0.0]]);
        let m = Model::new(l, Mat::eye(2), Some(Mat::eye(2)), "bad").unwrap();
        let r = validate_model(&m, &[0.0, 1.0]).unwrap();
        assert!(!r.g4_ok);
        assert!((r.g4_defects.unwrap().anticommutes_generator - 2.0).abs() < 1e-15);
    }

    #[test]
    fn skew_generator_has_zero_sigma() {
        assert_eq!(max_abs(&rotation_model().sigma().matrix), 0.0);
    }

    #[test]
    fn structural_errors() {
        let l = Mat::zeros((2, 2));
        assert!(matches!(Model::new(l.clone(), Mat::eye(3), None, ""), Err(Error::Structural(_))));
        let d = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(Model::new(l, d, None, ""), Err(Error::SingularCovariance(_))));
        assert!(validate_model(&rotation_model(), &[1.0]).is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let m = rotation_model();
        let p = perturb_reference(&m, &Mat::zeros((2, 2))).unwrap();
        assert!(max_abs_diff(p.covariance(), m.covariance()) < 1e-15);
    }

    #[test]
    fn inadmissible_perturbation_names_eigenvalue() {
        let m = rotation_model();
        let err = perturb_reference(&m, &(Mat::eye(2) * -2.0)).unwrap_err();
        assert!(err.to_string().contains("-1.0"));
    }
}
