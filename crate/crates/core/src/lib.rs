//! Tabular long-run CVaR Q-learning.
//!
//! - [`mdp`]: finite models, policies, stationary laws and sampling.
//! - [`risk`]: cost distributions, VaR/CVaR of mixtures and sample estimators.
//! - [`learner`]: the CVaR, mean-CVaR and mean learners.
//! - [`oracle`]: exact policy evaluation, enumeration and local-optimality
//!   certificates.
//! - [`envs`]: the machine replacement and energy storage benchmarks.
//! - [`harness`]: seeded replications with CSV and JSON output.
//!
//! ```
//! use lrcvar::envs::{build_machine_replacement, CostFamily};
//! use lrcvar::oracle::global_optimum;
//!
//! let model = build_machine_replacement(CostFamily::Gaussian);
//! let best = global_optimum(&model, 0.9, 0.0).unwrap();
//! assert_eq!(best.policy.actions(), &[0, 0, 0, 0, 0, 1]);
//! ```

pub mod envs;
pub mod harness;
pub mod learner;
pub mod mdp;
pub mod oracle;
pub mod risk;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/risk.md")]
    mod risk {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/learner.md")]
    mod learner {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}
