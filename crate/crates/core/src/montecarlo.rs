//! Sampling of the Gaussian reference and steady states, and empirical checks
//! of the fluctuation identities.

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::flow::{flow_point, BlockMatrix};
use crate::linalg::{cholesky_lower, max_abs, max_abs_diff, pairwise_sum, symmetrize, trace_product, Mat, Vector};
use crate::model::Model;
use crate::par::map_ordered;
use crate::renyi::domain_interval;

/// Draws per block. Fixed so that statistics do not depend on the worker count.
pub const BLOCK: usize = 512;

/// x = C z with z from a ChaCha stream selected by the draw index.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: Mat,
    seed: u64,
}

impl GaussianSampler {
    pub fn new(cov: &Mat, seed: u64) -> Result<Self> {
        Ok(GaussianSampler { factor: cholesky_lower(cov)?, seed })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn standard(&self, index: u64, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }

    pub fn draw(&self, index: u64) -> Vector {
        let mut z = Vector::zeros(self.dim());
        self.standard(index, z.as_slice_mut().expect("contiguous"));
        self.factor.dot(&z)
    }

    /// Draws start..start+count as the rows of a matrix.
    pub fn block(&self, start: u64, count: usize) -> Mat {
        let n = self.dim();
        let mut z = Mat::zeros((count, n));
        for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            self.standard(start + i as u64, row.as_slice_mut().expect("contiguous"));
        }
        z.dot(&self.factor.t())
    }

    /// Per-block results for `count` draws, in draw order.
    pub fn map_blocks<T, F>(&self, count: usize, workers: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&Mat) -> T + Sync + Send,
    {
        let blocks = count.div_ceil(BLOCK);
        map_ordered(blocks, workers, |b| {
            let start = b * BLOCK;
            let len = BLOCK.min(count - start);
            f(&self.block(start as u64, len))
        })
    }

    /// One scalar per draw, in draw order.
    pub fn per_draw<F>(&self, count: usize, workers: usize, f: F) -> Vec<f64>
    where
        F: Fn(&Mat) -> Vec<f64> + Sync + Send,
    {
        self.map_blocks(count, workers, f).into_iter().flatten().collect()
    }
}

/// (x, A x) for every row x of `xs`.
pub fn quadratic_forms(xs: &Mat, a: &Mat) -> Vec<f64> {
    let ax = xs.dot(a);
    (&ax * xs).sum_axis(Axis(1)).to_vec()
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleBatch {
    pub count: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
    /// (1/N) Σ x xᵀ.
    #[serde(skip)]
    pub second_moment: Mat,
    /// SHA-256 over the per-block digests of the draws.
    pub checksum: String,
}

pub fn sample_gaussian(cov: &Mat, seed: u64, count: usize, workers: usize) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::Invalid("sample count must be positive".into()));
    }
    let sampler = GaussianSampler::new(cov, seed)?;
    let n = sampler.dim();
    let parts = sampler.map_blocks(count, workers, |x| {
        let mut h = Sha256::new();
        for v in x.iter() {
            h.update(v.to_le_bytes());
        }
        (x.sum_axis(Axis(0)), x.t().dot(x), h.finalize())
    });
    let mut sum = Vector::zeros(n);
    let mut m2 = Mat::zeros((n, n));
    let mut h = Sha256::new();
    for (s, q, d) in &parts {
        sum += s;
        m2 += q;
        h.update(d);
    }
    let checksum = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(SampleBatch {
        count,
        seed,
        mean: (sum / count as f64).to_vec(),
        second_moment: symmetrize(&(m2 / count as f64)),
        checksum,
    })
}

/// Mean and standard error with ordered pairwise summation.
pub fn mean_and_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = if values.len() > 1 { pairwise_sum(&dev) / (n - 1.0) } else { 0.0 };
    (mean, (var / n).sqrt())
}

/// B_t = ∫₀ᵗ e^{sLᵀ} ς e^{sL} ds and the offset t·tr(Dς), so that
/// ∫₀ᵗ σ_s(x) ds = (x, B_t x) − offset.
#[derive(Debug, Clone)]
pub struct SigmaIntegral {
    pub time: f64,
    pub matrix: Mat,
    pub offset: f64,
    /// Richardson estimate |B_N − B_{N/2}|/15 in max-abs entry, accumulated over segments.
    pub error_estimate: f64,
    pub steps: usize,
}

impl SigmaIntegral {
    pub fn zero(model: &Model) -> Self {
        let n = model.dim();
        SigmaIntegral { time: 0.0, matrix: Mat::zeros((n, n)), offset: 0.0, error_estimate: 0.0, steps: 0 }
    }

    pub fn integral(&self, x: &Vector) -> f64 {
        x.dot(&self.matrix.dot(x)) - self.offset
    }
}

enum Carrier {
    /// Eᵀ U for ς = U Λ Uᵀ.
    LowRank(Mat, Vec<f64>),
    Dense(Mat),
}

/// Simpson nodes per gemm chunk in the low-rank accumulation.
const NODE_CHUNK: usize = 48;

struct Integrator<'a> {
    model: &'a Model,
    carrier: Carrier,
    sigma: Mat,
}

impl<'a> Integrator<'a> {
    fn new(model: &'a Model) -> Self {
        let fac = model.sigma_factor();
        let carrier = if fac.rank() * 4 <= model.dim() {
            Carrier::LowRank(fac.vectors.clone(), fac.values.clone())
        } else {
            Carrier::Dense(Mat::eye(model.dim()))
        };
        Integrator { model, carrier, sigma: model.sigma().matrix.clone() }
    }

    /// Adds ∫ over a segment of length `span` starting at the current carrier
    /// state, `steps` a positive multiple of 4; returns (integral, Richardson difference).
    fn segment(&mut self, span: f64, steps: usize) -> Result<(Mat, Mat)> {
        let n = self.model.dim();
        let h = span / steps as f64;
        let step = BlockMatrix::exp_generator(self.model, h)?;
        let w_full = |k: usize| -> f64 {
            let c = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            c * h / 3.0
        };
        let w_half = |k: usize| -> f64 {
            if k % 2 == 1 {
                return 0.0;
            }
            let j = k / 2;
            let c = if j == 0 || j == steps / 2 { 1.0 } else if j % 2 == 1 { 4.0 } else { 2.0 };
            c * 2.0 * h / 3.0
        };
        let mut total = Mat::zeros((n, n));
        let mut diff = Mat::zeros((n, n));
        match &mut self.carrier {
            Carrier::LowRank(w, lam) => {
                let r = lam.len();
                let mut k = 0;
                while k <= steps {
                    let end = (k + NODE_CHUNK).min(steps + 1);
                    let m = (end - k) * r;
                    let mut g = Mat::zeros((n, m));
                    let mut g1 = Mat::zeros((n, m));
                    let mut g2 = Mat::zeros((n, m));
                    for node in k..end {
                        if node > 0 {
                            *w = step.left(w, true);
                        }
                        let (a, b) = (w_full(node), w_full(node) - w_half(node));
                        for (j, l) in lam.iter().enumerate() {
                            let col = (node - k) * r + j;
                            let src = w.column(j);
                            g.column_mut(col).assign(&src);
                            g1.column_mut(col).assign(&(&src * (a * l)));
                            g2.column_mut(col).assign(&(&src * (b * l)));
                        }
                    }
                    total += &g.dot(&g1.t());
                    diff += &g.dot(&g2.t());
                    k = end;
                }
            }
            Carrier::Dense(e) => {
                for node in 0..=steps {
                    if node > 0 {
                        *e = step.left(e, false);
                    }
                    let integrand = e.t().dot(&self.sigma.dot(e));
                    total.scaled_add(w_full(node), &integrand);
                    diff.scaled_add(w_full(node) - w_half(node), &integrand);
                }
            }
        }
        Ok((symmetrize(&total), diff))
    }
}

fn steps_for(span: f64, max_step: f64) -> usize {
    let raw = (span.abs() / max_step).ceil() as usize;
    (raw.div_ceil(4) * 4).max(4)
}

/// B_t by composite Simpson with `steps` subintervals (even, at least 16;
/// rounded up to a multiple of 4 for the Richardson estimate).
pub fn sigma_integral_matrix(model: &Model, t: f64, steps: usize) -> Result<SigmaIntegral> {
    if steps < 16 || steps % 2 != 0 {
        return Err(Error::Invalid(format!("steps must be even and at least 16, got {steps}")));
    }
    if t == 0.0 {
        return Ok(SigmaIntegral::zero(model));
    }
    let steps = steps.div_ceil(4) * 4;
    let mut it = Integrator::new(model);
    let (matrix, diff) = it.segment(t, steps)?;
    Ok(SigmaIntegral {
        time: t,
        matrix,
        offset: t * model.sigma().trace_d_sigma,
        error_estimate: max_abs(&diff) / 15.0,
        steps,
    })
}

/// B_t at each time of a monotone grid starting from zero, integrating
/// segment by segment with step at most `max_step`.
pub fn sigma_integral_series(model: &Model, times: &[f64], max_step: f64) -> Result<Vec<SigmaIntegral>> {
    if !(max_step > 0.0) {
        return Err(Error::Invalid("max_step must be positive".into()));
    }
    let sign = times.iter().find(|t| **t != 0.0).map_or(1.0, |t| t.signum());
    let mut prev = 0.0;
    for &t in times {
        if t * sign < prev * sign {
            return Err(Error::Invalid("time grid must be monotone away from zero".into()));
        }
        prev = t;
    }
    let tr = model.sigma().trace_d_sigma;
    let mut it = Integrator::new(model);
    let mut acc = Mat::zeros((model.dim(), model.dim()));
    let mut err = 0.0;
    let mut steps_total = 0;
    let mut last = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        if t != last {
            let steps = steps_for(t - last, max_step);
            let (m, d) = it.segment(t - last, steps)?;
            acc += &m;
            err += max_abs(&d) / 15.0;
            steps_total += steps;
            last = t;
        }
        out.push(SigmaIntegral {
            time: t,
            matrix: acc.clone(),
            offset: t * tr,
            error_estimate: err,
            steps: steps_total,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MgfEstimate {
    pub t: f64,
    pub alpha: f64,
    pub count: usize,
    pub estimate: f64,
    pub std_error: f64,
}

/// log of the mean of exp(y) with max shift, and its delta-method standard error.
pub fn log_mean_exp(y: &[f64]) -> (f64, f64) {
    let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return (m, f64::NAN);
    }
    let w: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let (mean, se) = mean_and_error(&w);
    (m + mean.ln(), se / mean)
}

/// log ω(exp(−α[(x, B_t x) − offset])), requiring α inside J_t with margin 0.05·|J_t|.
pub fn empirical_mgf(
    model: &Model,
    integral: &SigmaIntegral,
    alpha: f64,
    seed: u64,
    count: usize,
    workers: usize,
) -> Result<MgfEstimate> {
    let dom = domain_interval(model, integral.time)?;
    if dom.is_bounded() {
        let margin = 0.05 * dom.length();
        if !(alpha - margin > dom.lower && alpha + margin < dom.upper) {
            return Err(Error::Domain(format!(
                "alpha {alpha} closer than {margin:.3e} to the boundary of {dom}"
            )));
        }
    }
    empirical_mgf_unchecked(model, integral, alpha, seed, count, workers)
}

/// As `empirical_mgf` without the domain guard, for probing the boundary.
pub fn empirical_mgf_unchecked(
    model: &Model,
    integral: &SigmaIntegral,
    alpha: f64,
    seed: u64,
    count: usize,
    workers: usize,
) -> Result<MgfEstimate> {
    let t = integral.time;
    if alpha == 0.0 {
        return Ok(MgfEstimate { t, alpha, count, estimate: 0.0, std_error: 0.0 });
    }
    let sampler = GaussianSampler::new(model.covariance(), seed)?;
    let y = sampler.per_draw(count, workers, |x| {
        quadratic_forms(x, &integral.matrix).into_iter().map(|q| -alpha * (q - integral.offset)).collect()
    });
    let (estimate, std_error) = log_mean_exp(&y);
    Ok(MgfEstimate { t, alpha, count, estimate, std_error })
}

/// Σ_t = (x, B_t x)/t − tr(Dς) along one draw x ~ N(0, cov).
pub fn slln_trajectory(series: &[SigmaIntegral], cov: &Mat, seed: u64) -> Result<Vec<(f64, f64)>> {
    let sampler = GaussianSampler::new(cov, seed)?;
    let x = sampler.draw(0);
    Ok(series
        .iter()
        .filter(|b| b.time != 0.0)
        .map(|b| (b.time, b.integral(&x) / b.time))
        .collect())
}

/// `count` log-spaced times in [t_min, horizon].
pub fn log_grid(t_min: f64, horizon: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![horizon];
    }
    let (a, b) = (t_min.ln(), horizon.ln());
    let mut g: Vec<f64> = (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect();
    g[count - 1] = horizon;
    g
}

#[derive(Debug, Clone, Serialize)]
pub struct CltReport {
    pub t: f64,
    pub count: usize,
    pub predicted_variance: f64,
    pub sample_mean: f64,
    pub sample_variance: f64,
    pub ks: f64,
    pub skipped: bool,
    pub note: Option<String>,
    /// (bin_lo, bin_hi, count).
    pub histogram: Vec<(f64, f64, usize)>,
}

/// Kolmogorov–Smirnov distance of the sample to N(0, variance).
pub fn ks_normal(values: &[f64], variance: f64) -> f64 {
    let normal = Normal::new(0.0, variance.sqrt()).expect("positive variance");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, usize)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v >= lo && v < hi {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

/// t^{−1/2}[(x, B_t x) − offset − t ω̄] for x ~ N(0, cov), compared with N(0, a).
#[allow(clippy::too_many_arguments)]
pub fn clt_sample(
    integral: &SigmaIntegral,
    cov: &Mat,
    omega_bar: f64,
    variance: f64,
    seed: u64,
    count: usize,
    workers: usize,
) -> Result<CltReport> {
    let t = integral.time;
    if !(variance > 0.0) {
        return Ok(CltReport {
            t,
            count,
            predicted_variance: variance,
            sample_mean: f64::NAN,
            sample_variance: f64::NAN,
            ks: f64::NAN,
            skipped: true,
            note: Some(format!("predicted variance {variance:e} is not positive; CLT is degenerate")),
            histogram: vec![],
        });
    }
    let sampler = GaussianSampler::new(cov, seed)?;
    let scale = t.abs().sqrt();
    let vals = sampler.per_draw(count, workers, |x| {
        quadratic_forms(x, &integral.matrix)
            .into_iter()
            .map(|q| (q - integral.offset - t * omega_bar) / scale)
            .collect()
    });
    let (mean, se) = mean_and_error(&vals);
    let sd = variance.sqrt();
    Ok(CltReport {
        t,
        count,
        predicted_variance: variance,
        sample_mean: mean,
        sample_variance: se * se * count as f64,
        ks: ks_normal(&vals, variance),
        skipped: false,
        note: None,
        histogram: histogram(&vals, -4.0 * sd, 4.0 * sd, 40),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MomentCheck {
    pub estimate: f64,
    pub std_error: f64,
    pub exact: f64,
    pub z_score: f64,
}

impl MomentCheck {
    fn new(values: &[f64], exact: f64) -> Self {
        let (estimate, std_error) = mean_and_error(values);
        MomentCheck { estimate, std_error, exact, z_score: (estimate - exact) / std_error }
    }
}

/// Sample mean of (x, A x) against tr(cov·A).
pub fn trace_identity(cov: &Mat, a: &Mat, seed: u64, count: usize, workers: usize) -> Result<MomentCheck> {
    let sampler = GaussianSampler::new(cov, seed)?;
    let vals = sampler.per_draw(count, workers, |x| quadratic_forms(x, a));
    Ok(MomentCheck::new(&vals, trace_product(cov, a)))
}

/// Sample mean of exp(ℓ_{ω_t|ω}(x)) over reference draws, against 1.
pub fn change_of_measure(model: &Model, t: f64, seed: u64, count: usize, workers: usize) -> Result<MomentCheck> {
    let fp = flow_point(model, t)?;
    let sampler = GaussianSampler::new(model.covariance(), seed)?;
    let ld = fp.logdet_term();
    let tt = fp.relative_t();
    let vals = sampler.per_draw(count, workers, |x| {
        quadratic_forms(x, tt).into_iter().map(|q| (ld - 0.5 * q).exp()).collect()
    });
    Ok(MomentCheck::new(&vals, 1.0))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NessInvariance {
    pub t: f64,
    /// max-abs(e^{tL} S e^{tLᵀ} − D₊) with S the sample second moment.
    pub defect: f64,
    pub threshold: f64,
}

pub fn ness_invariance(
    model: &Model,
    d_plus: &Mat,
    plateau_residual: f64,
    t: f64,
    seed: u64,
    count: usize,
    workers: usize,
) -> Result<NessInvariance> {
    let batch = sample_gaussian(d_plus, seed, count, workers)?;
    let e = BlockMatrix::exp_generator(model, t)?;
    let moved = e.sandwich(&batch.second_moment);
    Ok(NessInvariance {
        t,
        defect: max_abs_diff(&moved, d_plus),
        threshold: plateau_residual + 4.0 / (count as f64).sqrt(),
    })
}

/// Van Loan block exponential: B_t from exp(t[[−Lᵀ, ς],[0, L]]).
pub fn sigma_integral_van_loan(model: &Model, t: f64) -> Result<Mat> {
    let n = model.dim();
    let l = model.generator();
    let mut big = Mat::zeros((2 * n, 2 * n));
    big.slice_mut(s![..n, ..n]).assign(&(-&l.t()));
    big.slice_mut(s![..n, n..]).assign(&model.sigma().matrix);
    big.slice_mut(s![n.., n..]).assign(l);
    let ex = crate::expm::expm(&(big * t))?;
    let f22 = ex.slice(s![n.., n..]).to_owned();
    let f12 = ex.slice(s![..n, n..]).to_owned();
    Ok(symmetrize(&f22.t().dot(&f12)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_toy, ToySpec};

    #[test]
    fn draws_are_reproducible_and_layout_free() {
        let cov = Mat::eye(3) * 2.0;
        let a = sample_gaussian(&cov, 42, 1000, 1).unwrap();
        let b = sample_gaussian(&cov, 42, 1000, 3).unwrap();
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.mean, b.mean);
        let c = sample_gaussian(&cov, 43, 1000, 1).unwrap();
        assert_ne!(a.checksum, c.checksum);
    }

    #[test]
    fn simpson_matches_van_loan() {
        let (m, _) = build_toy(&ToySpec::new(16, 0.7)).unwrap();
        let b = sigma_integral_matrix(&m, 1.5, 64).unwrap();
        let vl = sigma_integral_van_loan(&m, 1.5).unwrap();
        assert!(max_abs_diff(&b.matrix, &vl) < 1e-7, "{}", max_abs_diff(&b.matrix, &vl));
        let series = sigma_integral_series(&m, &[0.0, 0.5, 1.5], 0.02).unwrap();
        assert!(max_abs_diff(&series[2].matrix, &vl) < 1e-8);
    }

    #[test]
    fn log_mean_exp_shift() {
        let (v, _) = log_mean_exp(&[1000.0, 1000.0]);
        assert!((v - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn ks_of_quantiles_is_small() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let vals: Vec<f64> = (0..999).map(|i| normal.inverse_cdf((i as f64 + 0.5) / 999.0)).collect();
        assert!(ks_normal(&vals, 1.0) < 1e-3);
    }
}
