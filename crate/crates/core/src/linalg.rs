//! Dense linear algebra helpers on top of ndarray / LAPACK.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{Cholesky, Diag, EigValsh, Eigh, Inverse, InverseC, SolveTriangular, UPLO};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;
pub type Vector = Array1<f64>;

/// Sizes above this use Krylov spectra when the operator is numerically low rank.
pub const DENSE_SPECTRUM_LIMIT: usize = 768;

pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).fold(0.0_f64, |m, (&x, &y)| m.max((x - y).abs()))
}

/// (A + Aᵀ)/2.
pub fn symmetrize(a: &Mat) -> Mat {
    let mut out = a.clone();
    out += &a.t();
    out *= 0.5;
    out
}

pub fn symmetry_defect(a: &Mat) -> f64 {
    max_abs_diff(a, &a.t().to_owned())
}

/// Maximum absolute column sum.
pub fn norm1(a: &Mat) -> f64 {
    a.axis_iter(Axis(1))
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Sum of absolute eigenvalues of a symmetric matrix.
pub fn trace_norm_sym(a: &Mat) -> Result<f64> {
    let ev = a.eigvalsh(UPLO::Lower)?;
    Ok(ev.iter().map(|x| x.abs()).sum())
}

pub fn trace(a: &Mat) -> f64 {
    a.diag().sum()
}

/// tr(AB) without forming the product.
pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        acc += a.row(i).dot(&b.column(i));
    }
    acc
}

pub fn check_square(a: &Mat, n: usize, what: &str) -> Result<()> {
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::Structural(format!(
            "{what} is {}x{}, expected {n}x{n}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(a: &Mat) -> Result<Mat> {
    a.cholesky(UPLO::Lower)
        .map_err(|e| Error::NotSpd(format!("Cholesky factorization failed: {e}")))
}

/// Cholesky with a relative pivot floor: every pivot L_ii² must exceed `floor_rel`·‖A‖_max.
/// Returns `None` when the factorization fails or a pivot falls under the floor.
pub fn cholesky_floored(a: &Mat, floor_rel: f64) -> Option<Mat> {
    let scale = max_abs(a);
    let l = a.cholesky(UPLO::Lower).ok()?;
    let floor = floor_rel * scale;
    if l.diag().iter().all(|&d| d.is_finite() && d * d > floor) {
        Some(l)
    } else {
        None
    }
}

/// log det from a Cholesky factor.
pub fn logdet_from_cholesky(l: &Mat) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn logdet_spd(a: &Mat) -> Result<f64> {
    Ok(logdet_from_cholesky(&cholesky_lower(a)?))
}

/// Inverse of an SPD matrix through its Cholesky factorization, symmetrized.
pub fn spd_inverse(a: &Mat) -> Result<Mat> {
    let inv = a
        .invc()
        .map_err(|e| Error::SingularCovariance(format!("Cholesky inverse failed: {e}")))?;
    Ok(symmetrize(&inv))
}

/// General inverse via LU.
/// LU inverse followed by Newton steps X ← X + X(I − AX) until the residual
/// reaches rounding level.
pub fn inverse(a: &Mat) -> Result<Mat> {
    let mut x = a.inv()?;
    let n = a.nrows();
    let target = 64.0 * f64::EPSILON * (n as f64).sqrt();
    let mut last = f64::INFINITY;
    for _ in 0..4 {
        let mut r = a.dot(&x);
        r.mapv_inplace(|v| -v);
        r.diag_mut().mapv_inplace(|v| v + 1.0);
        let res = max_abs(&r);
        if res <= target || res >= last {
            break;
        }
        last = res;
        x = &x + &x.dot(&r);
    }
    Ok(x)
}

/// Solve L X = B with L lower triangular.
pub fn solve_lower(l: &Mat, b: &Mat) -> Result<Mat> {
    Ok(l.solve_triangular(UPLO::Lower, Diag::NonUnit, b)?)
}

/// Cᵀ A C, symmetrized.
pub fn congruence(c: &Mat, a: &Mat) -> Mat {
    symmetrize(&c.t().dot(&a.dot(c)))
}

/// A B Aᵀ, symmetrized.
pub fn sandwich(a: &Mat, b: &Mat) -> Mat {
    symmetrize(&a.dot(&b.dot(&a.t())))
}

pub fn eigh(a: &Mat) -> Result<(Vector, Mat)> {
    Ok(a.eigh(UPLO::Lower)?)
}

pub fn eigvalsh(a: &Mat) -> Result<Vector> {
    Ok(a.eigvalsh(UPLO::Lower)?)
}

/// Symmetric square root of a symmetric positive semidefinite matrix.
pub fn sym_sqrt(a: &Mat) -> Result<Mat> {
    let (w, v) = eigh(a)?;
    let mut vs = v.clone();
    for (j, mut col) in vs.axis_iter_mut(Axis(1)).enumerate() {
        col *= w[j].max(0.0).sqrt();
    }
    Ok(symmetrize(&vs.dot(&v.t())))
}

/// Replace eigenvalues below `floor` by `floor`.
pub fn floor_spectrum(a: &Mat, floor: f64) -> Result<(Mat, bool)> {
    let (w, v) = eigh(a)?;
    if w.iter().all(|&x| x >= floor) {
        return Ok((a.clone(), false));
    }
    let mut vs = v.clone();
    for (j, mut col) in vs.axis_iter_mut(Axis(1)).enumerate() {
        col *= w[j].max(floor);
    }
    Ok((symmetrize(&vs.dot(&v.t())), true))
}

/// Zero the entries below 1e-150 of the largest, keeping products out of the subnormal range.
pub fn flush_tiny(mut a: Mat) -> Mat {
    let cut = 1e-150 * max_abs(&a);
    a.mapv_inplace(|x| if x.abs() < cut { 0.0 } else { x });
    a
}

/// Extract the principal submatrix on `idx`.
pub fn submatrix(a: &Mat, idx: &[usize]) -> Mat {
    let m = idx.len();
    Mat::from_shape_fn((m, m), |(i, j)| a[[idx[i], idx[j]]])
}

/// Scatter `block` into `out` at rows/columns `idx`.
pub fn scatter(out: &mut Mat, block: &Mat, idx: &[usize]) {
    for (bi, &i) in idx.iter().enumerate() {
        for (bj, &j) in idx.iter().enumerate() {
            out[[i, j]] = block[[bi, bj]];
        }
    }
}

/// Connected components of the joint sparsity graph of the given square matrices.
pub fn components(mats: &[ArrayView2<f64>]) -> Vec<Vec<usize>> {
    let n = mats[0].nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for m in mats {
        for ((i, j), &v) in m.indexed_iter() {
            if v != 0.0 && i != j {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Eigenvalues of a symmetric operator. Eigenvalues not listed in `values`
/// are exactly zero (certified); there are `implicit_zeros` of them.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub implicit_zeros: usize,
}

impl Spectrum {
    pub fn dense(values: Vec<f64>) -> Self {
        Spectrum { values, implicit_zeros: 0 }
    }

    pub fn merge(parts: Vec<Spectrum>) -> Self {
        let mut values = Vec::new();
        let mut z = 0;
        for p in parts {
            values.extend(p.values);
            z += p.implicit_zeros;
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Spectrum { values, implicit_zeros: z }
    }

    pub fn min(&self) -> f64 {
        let m = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        if self.implicit_zeros > 0 {
            m.min(0.0)
        } else {
            m
        }
    }

    pub fn max(&self) -> f64 {
        let m = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if self.implicit_zeros > 0 {
            m.max(0.0)
        } else {
            m
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len() + self.implicit_zeros
    }
}

/// Full spectrum of a symmetric matrix. Large matrices are first probed with
/// Lanczos (full reorthogonalization); if the Krylov space closes early and the
/// complement is certified null, the Ritz values are exact up to round-off.
pub fn sym_spectrum(k: &Mat) -> Result<Spectrum> {
    let n = k.nrows();
    if n <= DENSE_SPECTRUM_LIMIT {
        return Ok(Spectrum::dense(eigvalsh(k)?.to_vec()));
    }
    if let Some(sp) = lanczos_low_rank(n, |v| k.dot(v), 96) {
        return Ok(sp);
    }
    Ok(Spectrum::dense(eigvalsh(k)?.to_vec()))
}

/// Spectrum of a symmetric operator given only through its action, with a
/// dense fallback built on demand.
pub fn sym_spectrum_op<F, G>(n: usize, matvec: F, dense: G) -> Result<Spectrum>
where
    F: Fn(&Vector) -> Vector,
    G: FnOnce() -> Mat,
{
    if n > DENSE_SPECTRUM_LIMIT {
        if let Some(sp) = lanczos_low_rank(n, matvec, 96) {
            return Ok(sp);
        }
    }
    Ok(Spectrum::dense(eigvalsh(&dense())?.to_vec()))
}

/// Smallest and largest eigenvalue of a symmetric matrix. Large matrices that
/// are the identity plus a low-rank term avoid the dense solver.
pub fn extreme_eigenvalues(a: &Mat) -> Result<(f64, f64)> {
    let n = a.nrows();
    if n > DENSE_SPECTRUM_LIMIT {
        let sp = lanczos_low_rank(
            n,
            |v| {
                let mut w = a.dot(v);
                w -= v;
                w
            },
            96,
        );
        if let Some(sp) = sp {
            return Ok((1.0 + sp.min(), 1.0 + sp.max()));
        }
    }
    let ev = eigvalsh(a)?;
    Ok((ev[0], ev[n - 1]))
}

fn lanczos_low_rank<F: Fn(&Vector) -> Vector>(n: usize, matvec: F, max_steps: usize) -> Option<Spectrum> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1a2c);
    let mut q = Vector::from_shape_fn(n, |_| StandardNormal.sample(&mut rng));
    q /= q.dot(&q).sqrt();
    let mut basis: Vec<Vector> = vec![q];
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut scale = 0.0_f64;
    let steps = max_steps.min(n);
    loop {
        let j = basis.len() - 1;
        let mut w = matvec(&basis[j]);
        scale = scale.max(w.dot(&w).sqrt());
        let a = w.dot(&basis[j]);
        alphas.push(a);
        for _ in 0..2 {
            for b in &basis {
                let c = w.dot(b);
                w.scaled_add(-c, b);
            }
        }
        let beta = w.dot(&w).sqrt();
        if beta <= 1e-11 * scale || scale == 0.0 {
            break;
        }
        if basis.len() >= steps {
            return None;
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    if scale == 0.0 {
        return Some(Spectrum { values: vec![], implicit_zeros: n });
    }
    let m = alphas.len();
    // Certificate: the operator annihilates the complement of the Krylov space.
    let mut v = Vector::from_shape_fn(n, |_| StandardNormal.sample(&mut rng));
    for _ in 0..2 {
        for b in &basis {
            let c = v.dot(b);
            v.scaled_add(-c, b);
        }
    }
    let vn = v.dot(&v).sqrt();
    let kv = matvec(&v);
    if kv.dot(&kv).sqrt() > 1e-10 * scale * vn {
        return None;
    }
    let mut t = Mat::zeros((m, m));
    for i in 0..m {
        t[[i, i]] = alphas[i];
        if i + 1 < m {
            t[[i, i + 1]] = betas[i];
            t[[i + 1, i]] = betas[i];
        }
    }
    let ritz = eigvalsh(&t).ok()?;
    // The start vector has a null component, which shows up as one zero Ritz value.
    let mut values: Vec<f64> = ritz.to_vec();
    let mut implicit = n - m;
    if m < n {
        let pos = values
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap())
            .map(|(i, _)| i)?;
        if values[pos].abs() > 1e-10 * scale {
            return None;
        }
        values.remove(pos);
        implicit += 1;
    }
    Some(Spectrum { values, implicit_zeros: implicit })
}

/// Identity matrix.
pub fn eye(n: usize) -> Mat {
    Mat::eye(n)
}

/// Block-diagonal assembly.
pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros((n, n));
    let mut off = 0;
    for b in blocks {
        let m = b.nrows();
        out.slice_mut(s![off..off + m, off..off + m]).assign(b);
        off += m;
    }
    out
}

/// Pairwise summation in a fixed order.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 32 {
        let mut s = 0.0;
        let mut c = 0.0;
        for &v in x {
            let y = v - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        return s;
    }
    let mid = x.len() / 2;
    pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_spd(n: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Mat::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
        a.dot(&a.t()) + Mat::eye(n) * (n as f64)
    }

    #[test]
    fn logdet_matches_eigenvalues() {
        let a = random_spd(12, 3);
        let ev = eigvalsh(&a).unwrap();
        let want: f64 = ev.iter().map(|x| x.ln()).sum();
        assert_abs_diff_eq!(logdet_spd(&a).unwrap(), want, epsilon = 1e-10);
    }

    #[test]
    fn floored_cholesky_rejects_indefinite() {
        let a = ndarray::arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(cholesky_floored(&a, 1e-13).is_none());
        let b = ndarray::arr2(&[[1.0, 0.0], [0.0, 1e-15]]);
        assert!(cholesky_floored(&b, 1e-13).is_none());
        assert!(cholesky_floored(&Mat::eye(3), 1e-13).is_some());
    }

    #[test]
    fn lanczos_matches_dense_for_low_rank() {
        let n = 900;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = Mat::from_shape_fn((n, 3), |_| StandardNormal.sample(&mut rng));
        let d = ndarray::arr1(&[2.0, -0.5, 0.25]);
        let mut ud = u.clone();
        for (j, mut c) in ud.axis_iter_mut(Axis(1)).enumerate() {
            c *= d[j];
        }
        let k = symmetrize(&ud.dot(&u.t()));
        let sp = sym_spectrum(&k).unwrap();
        assert_eq!(sp.values.len(), 3);
        assert_eq!(sp.dim(), n);
        let dense = eigvalsh(&k).unwrap();
        assert_abs_diff_eq!(sp.min(), dense[0], epsilon = 1e-9);
        assert_abs_diff_eq!(sp.max(), dense[n - 1], epsilon = 1e-9);
        let big: Vec<f64> = dense.iter().cloned().filter(|x| x.abs() > 1e-6).collect();
        assert_eq!(big.len(), 3);
        for (a, b) in sp.values.iter().zip(big.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-8 * b.abs());
        }
    }

    #[test]
    fn components_split_block_diagonal() {
        let a = block_diag(&[&random_spd(3, 1), &random_spd(2, 2)]);
        let c = components(&[a.view()]);
        assert_eq!(c, vec![vec![0, 1, 2], vec![3, 4]]);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = random_spd(8, 5);
        let r = sym_sqrt(&a).unwrap();
        assert!(max_abs_diff(&r.dot(&r), &a) < 1e-10);
    }
}
