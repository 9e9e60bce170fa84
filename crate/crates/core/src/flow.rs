//! Covariance flow D_t, the relative operator T_t, log-densities and entropy balance.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::expm::expm;
use crate::linalg::{
    cholesky_lower, congruence, eigvalsh, extreme_eigenvalues, inverse, logdet_from_cholesky, max_abs_diff,
    norm1, spd_inverse, submatrix, sym_spectrum_op, symmetrize, trace_product, Mat, Spectrum, Vector,
    DENSE_SPECTRUM_LIMIT,
};
use crate::model::Model;

/// Largest admissible |t|·‖L‖₁ for the exponential.
pub const MAX_EXPONENT_NORM: f64 = 1e4;

/// A matrix that is block diagonal up to a permutation, stored per block.
#[derive(Debug, Clone)]
pub struct BlockMatrix {
    n: usize,
    blocks: Vec<(Vec<usize>, Mat)>,
}

impl BlockMatrix {
    pub fn identity(n: usize) -> Self {
        BlockMatrix { n, blocks: vec![((0..n).collect(), Mat::eye(n))] }
    }

    /// e^{tL}, one exponential per connected component of L. Components whose
    /// generator equals (the transpose of) an earlier one reuse its exponential.
    pub fn exp_generator(model: &Model, t: f64) -> Result<Self> {
        let l = model.generator();
        let nrm = t.abs() * norm1(l);
        if nrm > MAX_EXPONENT_NORM {
            return Err(Error::ExponentialRange(nrm));
        }
        let mut blocks: Vec<(Vec<usize>, Mat)> = Vec::new();
        let mut gens: Vec<Mat> = Vec::new();
        for idx in model.generator_blocks() {
            let g = submatrix(l, idx);
            let mut found = None;
            for (k, prev) in gens.iter().enumerate() {
                if prev.nrows() != g.nrows() {
                    continue;
                }
                if prev == &g {
                    found = Some(blocks[k].1.clone());
                    break;
                }
                if prev.t() == g {
                    found = Some(blocks[k].1.t().to_owned());
                    break;
                }
            }
            let e = match found {
                Some(e) => e,
                None => expm(&(&g * t))?,
            };
            gens.push(g);
            blocks.push((idx.clone(), e));
        }
        Ok(BlockMatrix { n: model.dim(), blocks })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn inverse(&self) -> Result<Self> {
        let blocks = self
            .blocks
            .iter()
            .map(|(idx, b)| Ok((idx.clone(), inverse(b)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockMatrix { n: self.n, blocks })
    }

    fn whole(&self) -> Option<&Mat> {
        match self.blocks.as_slice() {
            [(idx, b)] if idx.len() == self.n => Some(b),
            _ => None,
        }
    }

    pub fn to_dense(&self) -> Mat {
        if let Some(b) = self.whole() {
            return b.clone();
        }
        let mut out = Mat::zeros((self.n, self.n));
        for (idx, b) in &self.blocks {
            crate::linalg::scatter(&mut out, b, idx);
        }
        out
    }

    /// B·X, or Bᵀ·X when `transpose`.
    pub fn left(&self, x: &Mat, transpose: bool) -> Mat {
        if let Some(b) = self.whole() {
            return if transpose { b.t().dot(x) } else { b.dot(x) };
        }
        let mut out = Mat::zeros((self.n, x.ncols()));
        for (idx, b) in &self.blocks {
            let rows = x.select(Axis(0), idx);
            let prod = if transpose { b.t().dot(&rows) } else { b.dot(&rows) };
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(i).assign(&prod.row(k));
            }
        }
        out
    }

    /// X·B, or X·Bᵀ when `transpose`.
    pub fn right(&self, x: &Mat, transpose: bool) -> Mat {
        if let Some(b) = self.whole() {
            return if transpose { x.dot(&b.t()) } else { x.dot(b) };
        }
        let mut out = Mat::zeros((x.nrows(), self.n));
        for (idx, b) in &self.blocks {
            let cols = x.select(Axis(1), idx);
            let prod = if transpose { cols.dot(&b.t()) } else { cols.dot(b) };
            for (k, &j) in idx.iter().enumerate() {
                out.column_mut(j).assign(&prod.column(k));
            }
        }
        out
    }

    /// B·v.
    pub fn apply(&self, v: &Vector) -> Vector {
        let m = v.view().insert_axis(Axis(1)).to_owned();
        self.left(&m, false).index_axis(Axis(1), 0).to_owned()
    }

    /// B X Bᵀ, symmetrized.
    pub fn sandwich(&self, x: &Mat) -> Mat {
        let y = self.left(x, false);
        symmetrize(&self.right(&y, true))
    }

    /// Bᵀ X B, symmetrized.
    pub fn sandwich_t(&self, x: &Mat) -> Mat {
        let y = self.left(x, true);
        symmetrize(&self.right(&y, false))
    }
}

/// All flow quantities at a single time.
#[derive(Debug)]
pub struct FlowPoint {
    time: f64,
    model: Model,
    propagator: BlockMatrix,
    inverse_propagator: BlockMatrix,
    covariance_t: Mat,
    relative_t: Mat,
    logdet_term: f64,
    reference_operator: OnceLock<Mat>,
    reference_spectrum: OnceLock<Spectrum>,
}

/// D_t = e^{tL} D e^{tLᵀ}.
pub fn covariance_at(model: &Model, t: f64) -> Result<Mat> {
    if t == 0.0 {
        return Ok(model.covariance().clone());
    }
    Ok(BlockMatrix::exp_generator(model, t)?.sandwich(model.covariance()))
}

pub fn flow_point(model: &Model, t: f64) -> Result<FlowPoint> {
    let n = model.dim();
    if t == 0.0 {
        return Ok(FlowPoint {
            time: 0.0,
            model: model.clone(),
            propagator: BlockMatrix::identity(n),
            inverse_propagator: BlockMatrix::identity(n),
            covariance_t: model.covariance().clone(),
            relative_t: Mat::zeros((n, n)),
            logdet_term: 0.0,
            reference_operator: OnceLock::new(),
            reference_spectrum: OnceLock::new(),
        });
    }
    let propagator = BlockMatrix::exp_generator(model, t)?;
    let inverse_propagator = propagator.inverse()?;
    let covariance_t = propagator.sandwich(model.covariance());
    let d_inv = model.covariance_inverse();
    let relative_t = inverse_propagator.sandwich_t(d_inv) - d_inv;
    let mut fp = FlowPoint {
        time: t,
        model: model.clone(),
        propagator,
        inverse_propagator,
        covariance_t,
        relative_t,
        logdet_term: 0.0,
        reference_operator: OnceLock::new(),
        reference_spectrum: OnceLock::new(),
    };
    fp.logdet_term = if n <= DENSE_SPECTRUM_LIMIT {
        let k = fp.reference_operator();
        let l = cholesky_lower(&(k + &Mat::eye(n))).map_err(|_| {
            Error::NotSpd(format!("I + K_t is not positive definite at t = {t}: exponential is inaccurate"))
        })?;
        0.5 * logdet_from_cholesky(&l)
    } else {
        let sp = fp.reference_spectrum()?;
        if sp.min() <= -1.0 {
            return Err(Error::NotSpd(format!(
                "I + K_t is not positive definite at t = {t}: exponential is inaccurate"
            )));
        }
        0.5 * sp.values.iter().map(|m| m.ln_1p()).sum::<f64>()
    };
    Ok(fp)
}

impl FlowPoint {
    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn propagator(&self) -> &BlockMatrix {
        &self.propagator
    }

    /// e^{−tL}.
    pub fn inverse_propagator(&self) -> &BlockMatrix {
        &self.inverse_propagator
    }

    pub fn covariance_t(&self) -> &Mat {
        &self.covariance_t
    }

    /// T_t = D_t⁻¹ − D⁻¹.
    pub fn relative_t(&self) -> &Mat {
        &self.relative_t
    }

    /// ½ log det(I + D T_t).
    pub fn logdet_term(&self) -> f64 {
        self.logdet_term
    }

    /// K_t = Cᵀ T_t C with C the Cholesky factor of D.
    pub fn reference_operator(&self) -> &Mat {
        self.reference_operator
            .get_or_init(|| congruence(self.model.covariance_cholesky(), &self.relative_t))
    }

    /// Spectrum of K_t.
    pub fn reference_spectrum(&self) -> Result<&Spectrum> {
        if let Some(s) = self.reference_spectrum.get() {
            return Ok(s);
        }
        let sp = self.spectrum_with(self.model.covariance_cholesky(), Some(&self.reference_operator))?;
        Ok(self.reference_spectrum.get_or_init(|| sp))
    }

    /// Spectrum of Cᵀ T_t C for an arbitrary lower-triangular factor C.
    pub fn relative_spectrum(&self, c: &Mat) -> Result<Spectrum> {
        self.spectrum_with(c, None)
    }

    fn spectrum_with(&self, c: &Mat, cached: Option<&OnceLock<Mat>>) -> Result<Spectrum> {
        let n = c.nrows();
        if let Some(k) = cached.and_then(|k| k.get()) {
            return Ok(Spectrum::dense(eigvalsh(k)?.to_vec()));
        }
        let t = &self.relative_t;
        sym_spectrum_op(
            n,
            |v| c.t().dot(&t.dot(&c.dot(v))),
            || match cached {
                Some(lock) => lock.get_or_init(|| congruence(c, t)).clone(),
                None => congruence(c, t),
            },
        )
    }

    /// ℓ_{ω_t|ω}(x) = ½ log det(I + D T_t) − ½ (x, T_t x).
    pub fn log_density(&self, x: &Vector) -> f64 {
        self.logdet_term - 0.5 * x.dot(&self.relative_t.dot(x))
    }
}

/// Max-abs entry of T_{t+s} − T_t − e^{−tLᵀ} T_s e^{−tL}.
pub fn cocycle_defect(model: &Model, s: f64, t: f64) -> Result<f64> {
    let f_ts = flow_point(model, t + s)?;
    let f_t = flow_point(model, t)?;
    let f_s = flow_point(model, s)?;
    let pulled = f_t.inverse_propagator().sandwich_t(f_s.relative_t());
    let rhs = f_t.relative_t() + &pulled;
    Ok(max_abs_diff(f_ts.relative_t(), &rhs))
}

pub fn log_density(model: &Model, t: f64, x: &Vector) -> Result<f64> {
    Ok(flow_point(model, t)?.log_density(x))
}

/// ω_t(σ) = tr(ς(D_t − D)).
pub fn mean_entropy_production(model: &Model, t: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let s = &model.sigma().matrix;
    let dt = covariance_at(model, t)?;
    Ok(trace_product(s, &dt) - model.sigma().trace_d_sigma)
}

/// Two centred Gaussian covariances and T = D₂⁻¹ − D₁⁻¹.
#[derive(Debug, Clone)]
pub struct GaussianPair {
    pub d1: Mat,
    pub d2: Mat,
    pub rel_t: Mat,
}

impl GaussianPair {
    pub fn new(d1: Mat, d2: Mat) -> Result<Self> {
        let rel_t = symmetrize(&(spd_inverse(&d2)? - spd_inverse(&d1)?));
        Ok(GaussianPair { d1, d2, rel_t })
    }
}

/// Ent(ω_{D₂} | ω_{D₁}) = ½ tr(D₁T(I + D₁T)⁻¹) − ½ log det(I + D₁T), evaluated on
/// the eigenvalues μ of the symmetric form C₁ᵀ T C₁.
pub fn relative_entropy(pair: &GaussianPair) -> Result<f64> {
    let c = cholesky_lower(&pair.d1)?;
    let k = congruence(&c, &pair.rel_t);
    let mu = eigvalsh(&k)?;
    let terms: Vec<f64> = mu.iter().map(|&m| 0.5 * (m / (1.0 + m) - m.ln_1p())).collect();
    Ok(crate::linalg::pairwise_sum(&terms).min(0.0))
}

/// Values of s ↦ ω_s(σ) + tr(Dς) = tr(ς D_s) on the uniform grid s_k = k·t/steps.
fn sigma_trace_on_grid(model: &Model, t: f64, steps: usize) -> Result<Vec<f64>> {
    let h = t / steps as f64;
    let step = BlockMatrix::exp_generator(model, h)?;
    let d = model.covariance();
    let fac = model.sigma_factor();
    let mut out = Vec::with_capacity(steps + 1);
    if fac.rank() == 0 {
        return Ok(vec![0.0; steps + 1]);
    }
    if fac.rank() * 4 <= model.dim() {
        // tr(ς E D Eᵀ) = Σ_j λ_j wⱼᵀ D wⱼ with W = Eᵀ U.
        let mut w = fac.vectors.clone();
        for k in 0..=steps {
            if k > 0 {
                w = step.left(&w, true);
            }
            let dw = d.dot(&w);
            let mut acc = 0.0;
            for (j, lam) in fac.values.iter().enumerate() {
                acc += lam * w.column(j).dot(&dw.column(j));
            }
            out.push(acc);
        }
    } else {
        let s = &model.sigma().matrix;
        let mut dt = d.clone();
        for k in 0..=steps {
            if k > 0 {
                dt = step.sandwich(&dt);
            }
            out.push(trace_product(s, &dt));
        }
    }
    Ok(out)
}

pub(crate) fn simpson(values: &[f64], h: f64) -> f64 {
    let n = values.len() - 1;
    let mut acc = values[0] + values[n];
    for (k, v) in values.iter().enumerate().take(n).skip(1) {
        acc += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * h / 3.0
}

/// ∫₀ᵗ ω_s(σ) ds by composite Simpson, doubling from `quad_steps` until two
/// successive values differ by less than 1e-8.
pub fn integrated_entropy_production(model: &Model, t: f64, quad_steps: usize) -> Result<f64> {
    if quad_steps < 8 {
        return Err(Error::Invalid("quad_steps must be at least 8".into()));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let tr_ds = model.sigma().trace_d_sigma;
    let mut steps = quad_steps + quad_steps % 2;
    let eval = |steps: usize| -> Result<f64> {
        let v = sigma_trace_on_grid(model, t, steps)?;
        Ok(simpson(&v, t / steps as f64) - t * tr_ds)
    };
    let mut prev = eval(steps)?;
    for _ in 0..14 {
        steps *= 2;
        let next = eval(steps)?;
        if (next - prev).abs() < 1e-8 {
            return Ok(next);
        }
        prev = next;
    }
    Ok(prev)
}

/// |Ent(ω_t|ω) + ∫₀ᵗ ω_s(σ) ds|.
pub fn entropy_balance_defect(model: &Model, t: f64, quad_steps: usize) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let integral = integrated_entropy_production(model, t, quad_steps)?;
    let pair = GaussianPair::new(model.covariance().clone(), covariance_at(model, t)?)?;
    Ok((relative_entropy(&pair)? + integral).abs())
}

/// One row of a time scan.
#[derive(Debug, Clone, Copy)]
pub struct FlowRow {
    pub t: f64,
    pub trace_dt: f64,
    pub lambda_min_dt: f64,
    pub lambda_max_dt: f64,
    pub mean_sigma: f64,
    pub ent_balance_defect: f64,
}

pub fn scan_row(model: &Model, t: f64, quad_steps: usize) -> Result<FlowRow> {
    let dt = covariance_at(model, t)?;
    let (lo, hi) = extreme_eigenvalues(&dt)?;
    Ok(FlowRow {
        t,
        trace_dt: dt.diag().sum(),
        lambda_min_dt: lo,
        lambda_max_dt: hi,
        mean_sigma: trace_product(&model.sigma().matrix, &dt) - model.sigma().trace_d_sigma,
        ent_balance_defect: entropy_balance_defect(model, t, quad_steps)?,
    })
}

/// Flow points memoized by the exact bit pattern of t.
#[derive(Debug)]
pub struct FlowCache {
    model: Model,
    points: RwLock<HashMap<u64, Arc<FlowPoint>>>,
}

impl FlowCache {
    pub fn new(model: &Model) -> Self {
        FlowCache { model: model.clone(), points: RwLock::new(HashMap::new()) }
    }

    pub fn get(&self, t: f64) -> Result<Arc<FlowPoint>> {
        let key = t.to_bits();
        if let Some(p) = self.points.read().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(flow_point(&self.model, t)?);
        let mut w = self.points.write().expect("cache lock");
        Ok(w.entry(key).or_insert(p).clone())
    }

    pub fn len(&self) -> usize {
        self.points.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use ndarray::arr2;

    fn damped() -> Model {
        let l = arr2(&[[-0.3, 1.0, 0.0], [-1.0, -0.1, 0.4], [0.2, -0.4, -0.5]]);
        let d = arr2(&[[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 1.5]]);
        Model::new(l, d, None, "damped").unwrap()
    }

    #[test]
    fn time_zero_is_identity() {
        let fp = flow_point(&damped(), 0.0).unwrap();
        assert_eq!(max_abs(fp.relative_t()), 0.0);
        assert_eq!(fp.logdet_term(), 0.0);
        assert!(max_abs_diff(&fp.propagator().to_dense(), &Mat::eye(3)) == 0.0);
    }

    #[test]
    fn logdet_term_is_half_log_det_ratio() {
        let m = damped();
        let fp = flow_point(&m, 1.7).unwrap();
        let ld = crate::linalg::logdet_spd(m.covariance()).unwrap() - crate::linalg::logdet_spd(fp.covariance_t()).unwrap();
        assert!((fp.logdet_term() - 0.5 * ld).abs() < 1e-12);
    }

    #[test]
    fn block_products_match_dense() {
        let g = arr2(&[[0.0, 1.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, -2.0], [0.0, 0.0, 2.0, 0.0]]);
        let m = Model::new(g, Mat::eye(4), None, "").unwrap();
        assert_eq!(m.generator_blocks().len(), 2);
        let e = BlockMatrix::exp_generator(&m, 0.9).unwrap();
        let dense = e.to_dense();
        let x = Mat::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 - 3.5);
        assert!(max_abs_diff(&e.left(&x, false), &dense.dot(&x)) < 1e-14);
        assert!(max_abs_diff(&e.left(&x, true), &dense.t().dot(&x)) < 1e-14);
        assert!(max_abs_diff(&e.right(&x, false), &x.dot(&dense)) < 1e-14);
        assert!(max_abs_diff(&e.right(&x, true), &x.dot(&dense.t())) < 1e-14);
        let dense_exp = expm(&(m.generator() * 0.9)).unwrap();
        assert!(max_abs_diff(&dense, &dense_exp) < 1e-14);
    }

    #[test]
    fn scalar_relative_entropy() {
        let pair = GaussianPair::new(arr2(&[[1.0]]), arr2(&[[2.0]])).unwrap();
        let want = -0.5 - 0.5 * 0.5f64.ln();
        assert!((relative_entropy(&pair).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn cache_reuses_points() {
        let c = FlowCache::new(&damped());
        let a = c.get(0.5).unwrap();
        let b = c.get(0.5).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(c.len(), 1);
    }
}
