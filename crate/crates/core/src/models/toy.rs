//! Rank-one perturbed reference state under a lattice shift.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::Model;
use crate::renyi::{DomainInterval, DomainKind, EntropicFunctional, Provenance};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySpec {
    pub n: usize,
    pub lam: f64,
    #[serde(default = "default_true")]
    pub doubled: bool,
    /// Site of φ, 0-based; defaults to the centre.
    #[serde(default)]
    pub phi_index: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl ToySpec {
    pub fn new(n: usize, lam: f64) -> Self {
        ToySpec { n, lam, doubled: true, phi_index: None }
    }

    pub fn undoubled(mut self) -> Self {
        self.doubled = false;
        self
    }

    pub fn site(&self) -> usize {
        self.phi_index.unwrap_or(self.n / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 16 {
            return Err(Error::Invalid(format!("toy size {} below 16", self.n)));
        }
        if !(self.lam > -1.0) {
            return Err(Error::Invalid(format!("toy lambda {} must exceed -1", self.lam)));
        }
        if self.site() >= self.n {
            return Err(Error::Invalid(format!("phi_index {} outside 0..{}", self.site(), self.n)));
        }
        Ok(())
    }
}

/// Skew tridiagonal shift: +1 above, −1 below the diagonal.
pub fn shift_generator(n: usize) -> Mat {
    let mut l = Mat::zeros((n, n));
    for i in 0..n - 1 {
        l[[i, i + 1]] = 1.0;
        l[[i + 1, i]] = -1.0;
    }
    l
}

/// The unit vector φ of the model (normalized over both copies when doubled).
pub fn toy_phi(spec: &ToySpec) -> Vector {
    let m = spec.site();
    if spec.doubled {
        let mut v = Vector::zeros(2 * spec.n);
        v[m] = std::f64::consts::FRAC_1_SQRT_2;
        v[spec.n + m] = std::f64::consts::FRAC_1_SQRT_2;
        v
    } else {
        let mut v = Vector::zeros(spec.n);
        v[m] = 1.0;
        v
    }
}

pub fn build_toy(spec: &ToySpec) -> Result<(Model, ToyOracle)> {
    spec.validate()?;
    let n = spec.n;
    let l = shift_generator(n);
    let phi = toy_phi(spec);
    let dim = phi.len();
    let (gen, theta) = if spec.doubled {
        let mut g = Mat::zeros((dim, dim));
        let mut th = Mat::zeros((dim, dim));
        for i in 0..n {
            for j in 0..n {
                g[[i, j]] = l[[i, j]];
                g[[n + i, n + j]] = l[[j, i]];
            }
            th[[i, n + i]] = 1.0;
            th[[n + i, i]] = 1.0;
        }
        (g, Some(th))
    } else {
        (l, None)
    };
    let mut d = Mat::eye(dim);
    for i in 0..dim {
        for j in 0..dim {
            d[[i, j]] += spec.lam * phi[i] * phi[j];
        }
    }
    let label = format!(
        "toy n={} lambda={} {}",
        n,
        spec.lam,
        if spec.doubled { "doubled" } else { "single" }
    );
    let model = Model::new(gen, d, theta, label)?;
    Ok((model, ToyOracle { n, lam: spec.lam, site: spec.site() }))
}

/// Closed forms of the toy model, driven by the exact finite-lattice overlap.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ToyOracle {
    pub n: usize,
    pub lam: f64,
    pub site: usize,
}

impl ToyOracle {
    /// c(t) = (φ, e^{tL}φ) from the eigenpairs 2i cos θ_k, θ_k = kπ/(n+1),
    /// of the Dirichlet shift.
    pub fn overlap(&self, t: f64) -> f64 {
        let n = self.n;
        let m = (self.site + 1) as f64;
        let scale = 2.0 / (n as f64 + 1.0);
        let mut acc = 0.0;
        for k in 1..=n {
            let th = k as f64 * PI / (n as f64 + 1.0);
            let s = (m * th).sin();
            acc += s * s * (2.0 * t * th.cos()).cos();
        }
        scale * acc
    }

    fn spread(&self, t: f64) -> f64 {
        let c = self.overlap(t);
        (1.0 - c * c).max(0.0)
    }

    /// δ_t = √(¼ + (1+λ)/(λ²(1−c²))) − ½.
    pub fn delta_t(&self, t: f64) -> f64 {
        let s = self.spread(t);
        if self.lam == 0.0 || s == 0.0 {
            return f64::INFINITY;
        }
        (0.25 + (1.0 + self.lam) / (self.lam * self.lam * s)).sqrt() - 0.5
    }

    /// Radius of J_t⁺ = (−ρ, ρ), ρ = (1+λ)/(|λ|√(1−c²)).
    pub fn ness_radius(&self, t: f64) -> f64 {
        let s = self.spread(t);
        if self.lam == 0.0 || s == 0.0 {
            return f64::INFINITY;
        }
        (1.0 + self.lam) / (self.lam.abs() * s.sqrt())
    }

    pub fn e_t(&self, t: f64, alpha: f64) -> f64 {
        let d = self.delta_t(t);
        if !(alpha > -d && alpha < 1.0 + d) {
            return f64::INFINITY;
        }
        let l = self.lam;
        -0.5 * (1.0 + l * l / (1.0 + l) * alpha * (1.0 - alpha) * self.spread(t)).ln()
    }

    pub fn e_t_plus(&self, t: f64, alpha: f64) -> f64 {
        if !(alpha.abs() < self.ness_radius(t)) {
            return f64::INFINITY;
        }
        let l = self.lam;
        -0.5 * (1.0 - l * l / ((1.0 + l) * (1.0 + l)) * alpha * alpha * self.spread(t)).ln()
    }

    /// δ = |½ + 1/λ| − ½.
    pub fn delta(&self) -> f64 {
        if self.lam == 0.0 {
            return f64::INFINITY;
        }
        (0.5 + 1.0 / self.lam).abs() - 0.5
    }

    /// δ⁺ = (1+λ)/|λ|.
    pub fn delta_plus(&self) -> f64 {
        if self.lam == 0.0 {
            return f64::INFINITY;
        }
        (1.0 + self.lam) / self.lam.abs()
    }

    /// I(s) = (½ + δ)|s| − ½s.
    pub fn rate(&self, s: f64) -> f64 {
        (0.5 + self.delta()) * s.abs() - 0.5 * s
    }

    /// I⁺(s) = δ⁺|s|.
    pub fn rate_plus(&self, s: f64) -> f64 {
        self.delta_plus() * s.abs()
    }

    /// Limiting functional e ≡ 0 on (−δ, 1+δ).
    pub fn limit_functional(&self) -> EntropicFunctional {
        let d = self.delta();
        let dom = if d.is_finite() {
            DomainInterval::bounded(-d, 1.0 + d, DomainKind::Reference)
        } else {
            DomainInterval::whole_line(DomainKind::Reference)
        };
        EntropicFunctional::new(dom, Provenance::ClosedForm, |_| 0.0).with_derivative(|_| 0.0)
    }

    /// Limiting NESS functional e₊ ≡ 0 on (−δ⁺, δ⁺).
    pub fn limit_functional_plus(&self) -> EntropicFunctional {
        let d = self.delta_plus();
        let dom = if d.is_finite() {
            DomainInterval::bounded(-d, d, DomainKind::Ness)
        } else {
            DomainInterval::whole_line(DomainKind::Ness)
        };
        EntropicFunctional::new(dom, Provenance::ClosedForm, |_| 0.0).with_derivative(|_| 0.0)
    }

    /// One-way boundary echo time for a wave packet started at φ.
    pub fn echo_time(&self) -> f64 {
        let d = self.site.min(self.n - 1 - self.site) as f64;
        d / 2.0
    }
}
