//! Multi-study factor regression.
//!
//! Responses from `S` studies share covariate effects `β` and common loadings
//! `Φ`, while each study keeps its own loadings `Λ_s` and diagonal noise `Ψ_s`:
//!
//! ```text
//! x_is = β b_is + Φ f_is + Λ_s l_is + e_is,   Σ_s = ΦΦᵀ + Λ_sΛ_sᵀ + Ψ_s
//! ```
//!
//! Parameters are estimated by expectation/conditional maximization
//! ([`ecm::fit`]), latent dimensions are picked by AIC or BIC
//! ([`select::select`]), and fitted models are scored and evaluated with
//! [`scores`] and [`cv`]. [`sim`] generates synthetic benchmarks.

// `!(x > tol)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cv;
pub mod ecm;
pub mod error;
pub mod init;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod scores;
pub mod select;
pub mod sim;

/// Library version, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use ecm::{fit, ConvergenceConfig, FitResult, StoppingStatistic};
pub use error::{MsfrError, Result};
pub use model::{ModelDims, MultiStudyData, Params, StudyDataset};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/ecm.md")]
    mod ecm {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/scores.md")]
    mod scores {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cross-validation.md")]
    mod cross_validation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
