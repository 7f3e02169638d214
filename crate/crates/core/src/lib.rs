//! Causal estimation engine for observational studies with missing exposures,
//! missing baseline outcomes, missing follow-up outcomes, and within-cluster
//! dependence.
//!
//! The crate has three layers:
//!
//! - [`data`]: the observed-data model — records with explicit measurement
//!   indicators, CSV ingestion, and structural validation.
//! - [`sim`]: parametric structural-equation simulators for four study
//!   designs of increasing missingness complexity, with coupled
//!   counterfactual sampling and exact (enumeration-based) evaluation of
//!   both the causal truth and the observed-data g-formula. These serve as
//!   oracles: every identification claim the estimators rely on can be
//!   checked numerically.
//! - [`learners`], [`estimators`], [`inference`]: binary-regression learners
//!   and a cluster-respecting Super Learner; four estimators (complete-case,
//!   IPW, sequential G-computation, sequential-regression TMLE); and
//!   influence-curve standard errors aggregated to the cluster level.
//!
//! [`benchmark`] ties the layers into a replicated simulation study (bias,
//! variance, MSE, CI coverage per estimator).
//!
//! Everything is deterministic given a seed: random streams are counter-based
//! (keyed on seed, cluster, member, node), so parallel and sequential runs
//! produce identical output. Parallelism is provided by rayon behind the
//! `parallel` feature (enabled by default); disabling it falls back to
//! sequential execution with the same results.

pub mod benchmark;
pub mod data;
pub mod estimators;
pub mod exec;
pub mod inference;
pub mod learners;
pub mod sim;
pub mod streams;

mod error;
mod linalg;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

/// Predictions are kept inside [`PROB_CLAMP`, 1 - `PROB_CLAMP`] so that
/// log-likelihoods and logits stay finite.
pub const PROB_CLAMP: f64 = 1e-12;

/// Clamp a probability away from 0 and 1.
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Logistic function.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds; input is clamped away from {0, 1} first.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_logit_inverse() {
        for &x in &[-25.0, -2.0, 0.0, 0.5, 10.0] {
            assert!((logit(expit(x)) - x).abs() < 1e-9, "x={x}");
        }
        assert_eq!(expit(0.0), 0.5);
    }

    #[test]
    fn clamp_bounds() {
        assert_eq!(clamp_prob(-1.0), PROB_CLAMP);
        assert_eq!(clamp_prob(2.0), 1.0 - PROB_CLAMP);
        assert_eq!(clamp_prob(0.3), 0.3);
    }
}
