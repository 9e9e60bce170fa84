//! Entropic fluctuations of linear Gaussian dynamical systems.

extern crate blas_src;

pub mod asymptotics;
pub mod error;
pub mod expm;
pub mod flow;
pub mod io;
pub mod ldp;
pub mod linalg;
pub mod model;
pub mod models;
pub mod montecarlo;
pub mod par;
pub mod renyi;

pub use error::{Error, Result};
pub use model::Model;
