//! One-dimensional harmonic crystal coupled to two thermal halves.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigvalsh, spd_inverse, Mat};
use crate::model::{perturb_reference, Model};
use crate::renyi::{DomainInterval, DomainKind, EntropicFunctional, Provenance};

/// (√5 − 1)/(2π).
pub const KAPPA: f64 = 0.196_726_328_616_693_23;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Inhomogeneity {
    /// On-site frequencies ω_n, one per site from −n_left to n_right.
    pub omega: Vec<f64>,
    /// Spring constants κ_n for n = −n_left ..= n_right + 1; κ_n couples sites n−1 and n.
    pub kappa: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSpec {
    pub n_left: usize,
    pub n_right: usize,
    /// (T_left, T_centre, T_right).
    pub temps: (f64, f64, f64),
    #[serde(default)]
    pub inhomogeneous: Option<Inhomogeneity>,
}

impl ChainSpec {
    pub fn new(n_left: usize, n_right: usize, temps: (f64, f64, f64)) -> Self {
        ChainSpec { n_left, n_right, temps, inhomogeneous: None }
    }

    pub fn sites(&self) -> usize {
        self.n_left + self.n_right + 1
    }

    /// Index of the centre site in the site ordering.
    pub fn centre(&self) -> usize {
        self.n_left
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_left == 0 || self.n_right == 0 {
            return Err(Error::Invalid("chain halves must be nonempty".into()));
        }
        let (a, b, c) = self.temps;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::Invalid("temperatures must be positive".into()));
        }
        if let Some(inh) = &self.inhomogeneous {
            let n = self.sites();
            if inh.omega.len() != n || inh.kappa.len() != n + 1 {
                return Err(Error::Invalid(format!(
                    "inhomogeneous chain needs {} frequencies and {} spring constants",
                    n,
                    n + 1
                )));
            }
            if inh.omega.iter().chain(inh.kappa.iter()).any(|&x| !(x > 0.0)) {
                return Err(Error::Invalid("frequencies and spring constants must be positive".into()));
            }
        }
        Ok(())
    }

    fn omega(&self, i: usize) -> f64 {
        self.inhomogeneous.as_ref().map_or(1.0, |h| h.omega[i])
    }

    /// κ between site i−1 and site i (site indices 0..sites, with sentinels at both ends).
    fn spring(&self, i: usize) -> f64 {
        self.inhomogeneous.as_ref().map_or(1.0, |h| h.kappa[i])
    }

    /// Region of each site: 0 left, 1 centre, 2 right.
    fn region(&self, i: usize) -> usize {
        match i.cmp(&self.centre()) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => 1,
            std::cmp::Ordering::Greater => 2,
        }
    }

    fn temp(&self, region: usize) -> f64 {
        match region {
            0 => self.temps.0,
            1 => self.temps.1,
            _ => self.temps.2,
        }
    }

    /// Largest group velocity of the homogeneous lattice, max_k sin k/√(3 − 2cos k).
    pub fn max_group_velocity() -> f64 {
        (5f64.sqrt() - 1.0) / 2.0
    }

    /// Time for a signal from the centre to reach the nearer boundary.
    pub fn echo_free_horizon(&self) -> f64 {
        self.n_left.min(self.n_right) as f64 / Self::max_group_velocity()
    }
}

/// Dirichlet Jacobi matrix j on all sites.
pub fn jacobi(spec: &ChainSpec) -> Mat {
    let n = spec.sites();
    let mut j = Mat::zeros((n, n));
    for i in 0..n {
        j[[i, i]] = spec.omega(i) + spec.spring(i) + spec.spring(i + 1);
        if i + 1 < n {
            j[[i, i + 1]] = -spec.spring(i + 1);
            j[[i + 1, i]] = -spec.spring(i + 1);
        }
    }
    j
}

fn region_sites(spec: &ChainSpec, region: usize) -> Vec<usize> {
    (0..spec.sites()).filter(|&i| spec.region(i) == region).collect()
}

pub fn build_chain(spec: &ChainSpec) -> Result<(Model, Option<ChainOracle>)> {
    spec.validate()?;
    let n = spec.sites();
    let j = jacobi(spec);
    let mut l = Mat::zeros((2 * n, 2 * n));
    for a in 0..n {
        for b in 0..n {
            l[[a, n + b]] = -j[[a, b]];
        }
        l[[n + a, a]] = 1.0;
    }
    let mut d = Mat::zeros((2 * n, 2 * n));
    for region in 0..3 {
        let idx = region_sites(spec, region);
        let t = spec.temp(region);
        let js = crate::linalg::submatrix(&j, &idx);
        let js_inv = spd_inverse(&js)?;
        for (a, &ia) in idx.iter().enumerate() {
            d[[ia, ia]] = t;
            for (b, &ib) in idx.iter().enumerate() {
                d[[n + ia, n + ib]] = t * js_inv[[a, b]];
            }
        }
    }
    let mut theta = Mat::zeros((2 * n, 2 * n));
    for a in 0..n {
        theta[[a, a]] = -1.0;
        theta[[n + a, n + a]] = 1.0;
    }
    let (tl, tc, tr) = spec.temps;
    let label = format!(
        "{} chain {}+1+{} T=({tl},{tc},{tr})",
        if spec.inhomogeneous.is_some() { "inhomogeneous" } else { "harmonic" },
        spec.n_left,
        spec.n_right
    );
    let model = Model::new(l, d, Some(theta), label)?;
    let oracle = spec.inhomogeneous.is_none().then(|| ChainOracle::new(tl, tr));
    Ok((model, oracle))
}

/// Spectrum of the homogeneous Dirichlet j, which lies in [1, 5].
pub fn jacobi_spectrum(spec: &ChainSpec) -> Result<Vec<f64>> {
    Ok(eigvalsh(&jacobi(spec))?.to_vec())
}

/// P with D⁻¹ + P = β_r h − X h_ℓ^(N), X = β_r − β_ℓ ≥ 0, h = 1 ⊕ j and h_ℓ^(N)
/// carrying the Neumann restriction of j to the left half plus the centre.
pub fn build_chain_perturbation(spec: &ChainSpec) -> Result<Mat> {
    spec.validate()?;
    let (bl, bc, br) = (1.0 / spec.temps.0, 1.0 / spec.temps.1, 1.0 / spec.temps.2);
    if br < bl {
        return Err(Error::Invalid("perturbation requires beta_right >= beta_left".into()));
    }
    let n = spec.sites();
    let c = spec.centre();
    let kl = spec.spring(c);
    let kr = spec.spring(c + 1);
    let mut p = Mat::zeros((2 * n, 2 * n));
    p[[c, c]] = bl - bc;
    // q block at the centre: β_r j_cc − X(j_cc − κ_right) − β_c j_cc.
    let jcc = spec.omega(c) + kl + kr;
    p[[n + c, n + c]] = (br - bc) * jcc - (br - bl) * (jcc - kr);
    p[[n + c, n + c - 1]] = -bl * kl;
    p[[n + c - 1, n + c]] = -bl * kl;
    p[[n + c, n + c + 1]] = -br * kr;
    p[[n + c + 1, n + c]] = -br * kr;
    Ok(p)
}

/// β_r h − X h_ℓ^(N), the inverse of the perturbed covariance.
pub fn perturbed_precision(spec: &ChainSpec) -> Mat {
    let (bl, br) = (1.0 / spec.temps.0, 1.0 / spec.temps.2);
    let x = br - bl;
    let n = spec.sites();
    let c = spec.centre();
    let j = jacobi(spec);
    let mut jn = j.clone();
    for a in 0..n {
        for b in 0..n {
            if a > c || b > c {
                jn[[a, b]] = 0.0;
            }
        }
    }
    jn[[c, c]] -= spec.spring(c + 1);
    let mut h = Mat::zeros((2 * n, 2 * n));
    for a in 0..n {
        let lc = if a <= c { 1.0 } else { 0.0 };
        h[[a, a]] = br - x * lc;
        for b in 0..n {
            h[[n + a, n + b]] = br * j[[a, b]] - x * jn[[a, b]];
        }
    }
    h
}

/// Chain model with the perturbed reference state (D⁻¹ + P)⁻¹.
pub fn build_perturbed_chain(spec: &ChainSpec) -> Result<Model> {
    let (m, _) = build_chain(spec)?;
    let p = build_chain_perturbation(spec)?;
    perturb_reference(&m, &p)
}

/// Closed forms for the homogeneous chain.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChainOracle {
    pub kappa: f64,
    pub t_left: f64,
    pub t_right: f64,
}

impl ChainOracle {
    pub fn new(t_left: f64, t_right: f64) -> Self {
        ChainOracle { kappa: KAPPA, t_left, t_right }
    }

    /// r = (T_ℓ − T_r)²/(T_ℓ T_r).
    pub fn r(&self) -> f64 {
        let d = self.t_left - self.t_right;
        d * d / (self.t_left * self.t_right)
    }

    /// δ_o = min(T_ℓ, T_r)/|T_ℓ − T_r|.
    pub fn delta_o(&self) -> f64 {
        let d = (self.t_left - self.t_right).abs();
        if d == 0.0 {
            return f64::INFINITY;
        }
        self.t_left.min(self.t_right) / d
    }

    /// e(α) = −κ log(1 + rα(1−α)), +∞ off (−δ_o, 1+δ_o).
    pub fn e(&self, alpha: f64) -> f64 {
        let d = self.delta_o();
        if !(alpha > -d && alpha < 1.0 + d) {
            return f64::INFINITY;
        }
        -self.kappa * (self.r() * alpha * (1.0 - alpha)).ln_1p()
    }

    pub fn e_prime(&self, alpha: f64) -> f64 {
        let r = self.r();
        -self.kappa * r * (1.0 - 2.0 * alpha) / (1.0 + r * alpha * (1.0 - alpha))
    }

    pub fn functional(&self) -> EntropicFunctional {
        let d = self.delta_o();
        let dom = if d.is_finite() {
            DomainInterval::bounded(-d, 1.0 + d, DomainKind::Reference)
        } else {
            DomainInterval::whole_line(DomainKind::Reference)
        };
        let (a, b) = (*self, *self);
        EntropicFunctional::new(dom, Provenance::ClosedForm, move |x| a.e(x)).with_derivative(move |x| b.e_prime(x))
    }

    /// ω₊(σ) = κr.
    pub fn omega_plus(&self) -> f64 {
        self.kappa * self.r()
    }

    /// e″(1) = κ(2r + r²).
    pub fn clt_variance(&self) -> f64 {
        let r = self.r();
        self.kappa * (2.0 * r + r * r)
    }

    /// Two atoms of mass κ at −δ_o and 1 + δ_o.
    pub fn nu_atoms(&self) -> [(f64, f64); 2] {
        let d = self.delta_o();
        [(-d, self.kappa), (1.0 + d, self.kappa)]
    }
}

/// Group velocity sin k/√(3 − 2cos k) maximized on a fine grid.
pub fn numerical_max_group_velocity() -> f64 {
    (0..=20000)
        .map(|i| {
            let k = PI * i as f64 / 20000.0;
            k.sin() / (3.0 - 2.0 * k.cos()).sqrt()
        })
        .fold(0.0, f64::max)
}
