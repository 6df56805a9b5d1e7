//! Multivariate latent growth models for mixed binomial/normal longitudinal
//! responses, estimated by maximum likelihood via EM with Gauss-Hermite
//! quadrature.
//!
//! Each item follows its own random polynomial growth curve over time, and
//! one or more common factors capture the cross-item correlation that remains
//! after the temporal dynamics. Binomial items are linked through a logit,
//! normal items through the identity. The crate provides:
//!
//! - [`model`]: model specification, parameter sets, linear predictors;
//! - [`dist`]: conditional log-densities and the latent log-prior;
//! - [`quad`]: tensor-product Gauss-Hermite machinery for the marginal
//!   likelihood and posterior expectations;
//! - [`em`]: the EM estimator with expected scores, closed-form and
//!   Newton-Raphson M-steps, and numerical-Hessian standard errors;
//! - [`diag`]: post-fit diagnostics (standardized loadings, one-way margin
//!   fit statistics, correlation discrepancies, AIC/BIC);
//! - [`sim`]: synthetic panel generation from a parameter set;
//! - [`io`] / [`config`] / [`report`]: panel CSV codec, model config files,
//!   and report rendering used by the CLI.

pub mod config;
pub mod diag;
pub mod dist;
pub mod em;
pub mod error;
pub mod io;
pub mod model;
pub mod quad;
pub mod report;
pub mod sim;

pub use error::{Error, Result};
pub use model::{
    Family, ItemSpec, LoadingScheme, ModelSpec, PanelDataset, ParameterSet, VarianceScheme,
};
pub use quad::QuadratureGrid;

/// Neumaier-compensated summation; used wherever cross-individual sums must
/// be stable and independent of accumulation grouping.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
