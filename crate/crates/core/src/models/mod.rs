//! Builders and closed-form oracles for the shipped example systems.

pub mod chain;
pub mod toy;

use serde::{Deserialize, Serialize};

pub use chain::{
    build_chain, build_chain_perturbation, build_perturbed_chain, ChainOracle, ChainSpec, Inhomogeneity, KAPPA,
};
pub use toy::{build_toy, ToyOracle, ToySpec};

use crate::error::Result;
use crate::model::Model;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainParams {
    pub n_left: usize,
    pub n_right: usize,
    pub temps: [f64; 3],
    /// Use the perturbed reference state (D⁻¹ + P)⁻¹.
    #[serde(default)]
    pub perturbed: bool,
    #[serde(default)]
    pub omega: Option<Vec<f64>>,
    #[serde(default)]
    pub kappa: Option<Vec<f64>>,
}

impl ChainParams {
    fn spec(&self, inhomogeneous: bool) -> ChainSpec {
        let mut s = ChainSpec::new(self.n_left, self.n_right, (self.temps[0], self.temps[1], self.temps[2]));
        if inhomogeneous {
            let n = s.sites();
            s.inhomogeneous = Some(Inhomogeneity {
                omega: self.omega.clone().unwrap_or_else(|| vec![1.0; n]),
                kappa: self.kappa.clone().unwrap_or_else(|| vec![1.0; n + 1]),
            });
        }
        s
    }
}

/// Builder reference as it appears in model files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum BuilderSpec {
    Toy(ToySpec),
    Chain(ChainParams),
    ChainInhomogeneous(ChainParams),
}

pub fn build(spec: &BuilderSpec) -> Result<Model> {
    match spec {
        BuilderSpec::Toy(t) => Ok(build_toy(t)?.0),
        BuilderSpec::Chain(p) | BuilderSpec::ChainInhomogeneous(p) => {
            let s = p.spec(matches!(spec, BuilderSpec::ChainInhomogeneous(_)));
            if p.perturbed {
                build_perturbed_chain(&s)
            } else {
                Ok(build_chain(&s)?.0)
            }
        }
    }
}
