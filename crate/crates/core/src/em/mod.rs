//! Maximum likelihood estimation via EM: posterior expectations on a
//! Gauss-Hermite grid (E), closed-form updates for the latent distribution
//! and normal measurement parameters plus Newton-Raphson for binomial
//! loadings (M), repeated to convergence, with numerical-Hessian standard
//! errors at the end.
//!
//! The quadrature transform depends on the latent mean and covariance, so
//! the grid is rebuilt at the start of every iteration and frozen within it;
//! the prior-ratio evaluation in [`crate::quad`] keeps each frozen-grid
//! cycle a genuine EM step, so the within-cycle ascent property holds
//! exactly.

mod estep;
mod init;
mod mstep;
mod scores;
mod se;

pub use init::{initialize, jitter_params};
pub use mstep::{
    check_covariate_variation, m_step_binomial_loadings, m_step_covariates, m_step_latent,
    m_step_normal,
};
pub use scores::{
    expected_score_mu, expected_score_psi, score_binomial_loading, score_covariates,
    score_normal_loading, score_sigma2, stacked_expected_score,
};
pub use se::{standard_errors, StandardErrors};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{validate, Family, ModelSpec, PanelDataset, ParameterSet};
use crate::quad::{build_grid, marginal_loglik, QuadratureGrid};

use estep::{e_step, CellLayout, EStepStats};
use mstep::{newton_binomial, normal_closed_form, ActiveParams, ActiveSet};

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Gauss-Hermite order per latent dimension (node count is m^d).
    pub quad_order: usize,
    pub max_iterations: usize,
    /// Convergence tolerance on the max absolute parameter change.
    pub param_tol: f64,
    /// Convergence tolerance on the log-likelihood change.
    pub loglik_tol: f64,
    pub newton_max_iterations: usize,
    pub newton_tol: f64,
    /// Reserved for randomized restarts; the default initialization is
    /// deterministic.
    pub seed: u64,
    pub compute_standard_errors: bool,
    /// Record the log-likelihood before and after each M-step on the
    /// iteration's frozen grid (one extra likelihood pass per iteration).
    pub track_fixed_grid_ascent: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            quad_order: 5,
            max_iterations: 500,
            param_tol: 1e-5,
            loglik_tol: 1e-7,
            newton_max_iterations: 25,
            newton_tol: 1e-9,
            seed: 0,
            compute_standard_errors: true,
            track_fixed_grid_ascent: false,
        }
    }
}

impl FitOptions {
    fn check(&self) -> Result<()> {
        if self.param_tol <= 0.0 || self.loglik_tol <= 0.0 || self.newton_tol <= 0.0 {
            return Err(Error::input("tolerances must be positive"));
        }
        if self.max_iterations < 1 || self.newton_max_iterations < 1 {
            return Err(Error::input("iteration caps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParameterSet,
    /// Marginal log-likelihood at the start of each iteration plus the final
    /// value (evaluated on the grid built from the iteration's parameters).
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub convergence_reason: String,
    pub iterations: usize,
    /// Standard errors per free parameter in packed order; `None` when the
    /// observed information was not positive-definite.
    pub standard_errors: Option<DVector<f64>>,
    pub warnings: Vec<String>,
    pub aic: f64,
    pub bic: f64,
    pub n_free_parameters: usize,
    pub n: usize,
    /// When tracked: per iteration, the log-likelihood before and after the
    /// M-step evaluated on that iteration's frozen grid.
    pub fixed_grid_ascent: Option<Vec<(f64, f64)>>,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap()
    }
}

/// Pooled sample variances per item, used to floor degenerate residual
/// variances at 1e-8 of the item's scale.
fn sigma2_floors(data: &PanelDataset, spec: &ModelSpec) -> Vec<f64> {
    spec.items
        .iter()
        .enumerate()
        .map(|(j, item)| {
            if item.family != Family::Normal {
                return 0.0;
            }
            let vals = &data.items[j].values;
            let n = (vals.nrows() * vals.ncols()) as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (1e-8 * var).max(1e-12)
        })
        .collect()
}

fn latent_moments(stats: &EStepStats, grid: &QuadratureGrid) -> (DVector<f64>, DMatrix<f64>) {
    let d = grid.dim;
    let mut s1 = DVector::zeros(d);
    let mut s2 = DMatrix::zeros(d, d);
    for g in 0..grid.n_nodes() {
        let w = stats.w_plus[g];
        let node = grid.node(g);
        for r in 0..d {
            s1[r] += w * node[r];
            for c in 0..=r {
                s2[(r, c)] += w * node[r] * node[c];
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            s2[(c, r)] = s2[(r, c)];
        }
    }
    (s1, s2)
}

/// Flips the sign of factor k's column in every item's loadings whenever the
/// anchor loading is negative. The tensor grid is symmetric in each factor
/// coordinate, so the frozen-grid likelihood is invariant under the flip.
fn enforce_anchor_signs(spec: &ModelSpec, params: &mut ParameterSet) {
    for (k, &anchor) in spec.anchors.iter().enumerate() {
        if params.loadings[anchor][(0, k)] < 0.0 {
            for l in params.loadings.iter_mut() {
                for r in 0..l.nrows() {
                    l[(r, k)] = -l[(r, k)];
                }
            }
        }
    }
}

/// Fits the model starting from moment-based initial values.
pub fn fit(data: &PanelDataset, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    let start = initialize(data, spec, options)?;
    fit_from(data, spec, options, start)
}

/// Fits the model from explicit starting values.
pub fn fit_from(
    data: &PanelDataset,
    spec: &ModelSpec,
    options: &FitOptions,
    start: ParameterSet,
) -> Result<FitResult> {
    options.check()?;
    let violations = validate(spec, &start);
    if !violations.is_empty() {
        return Err(Error::input(format!(
            "invalid starting parameters: {}",
            violations
                .iter()
                .map(|v| v.what.clone())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    check_covariate_variation(data, spec)?;
    let layout = CellLayout::new(spec);
    let floors = sigma2_floors(data, spec);
    let m = options.quad_order;

    let mut params = start;
    let mut grid = build_grid(spec, &params, m)?;
    let mut stats = e_step(data, spec, &params, &grid, &layout)?;
    let mut trace = vec![stats.loglik];
    let mut warnings: Vec<String> = Vec::new();
    let mut floor_warned = vec![false; spec.n_items()];
    let mut ascent = options.track_fixed_grid_ascent.then(Vec::new);
    let mut converged = false;
    let mut reason = String::new();
    let mut iterations = 0;

    for _ in 0..options.max_iterations {
        iterations += 1;
        let old_packed = params.pack(spec);
        let mut new_params = params.clone();

        let (s1, s2) = latent_moments(&stats, &grid);
        let (mu_b, psi_b) = m_step_latent(spec, stats.n, &s1, &s2)?;
        new_params.mu_beta = mu_b;
        new_params.psi_beta = psi_b;

        for (j, item) in spec.items.iter().enumerate() {
            match item.family {
                Family::Binomial => {
                    let active = ActiveSet::new(spec, j, ActiveParams::LoadingsAndCovariates);
                    if active.len() > 0 {
                        let theta = newton_binomial(
                            data,
                            spec,
                            &params,
                            &grid,
                            &layout,
                            &stats,
                            &active,
                            options.newton_max_iterations,
                            options.newton_tol,
                        )?;
                        active.write(&mut new_params, &theta);
                    }
                }
                Family::Normal => {
                    let active = ActiveSet::new(spec, j, ActiveParams::LoadingsAndCovariates);
                    let upd = normal_closed_form(
                        data, spec, &params, &grid, &layout, &stats, &active, floors[j],
                    )?;
                    active.write(&mut new_params, &upd.theta);
                    new_params.sigma2[j] = upd.sigma2;
                    if upd.floored.iter().any(|&f| f) && !floor_warned[j] {
                        floor_warned[j] = true;
                        warnings.push(format!(
                            "item {}: residual variance hit its degeneracy floor \
                             ({:.3e}); estimates may sit at a boundary",
                            item.name, floors[j]
                        ));
                    }
                }
            }
        }
        enforce_anchor_signs(spec, &mut new_params);

        if let Some(tr) = ascent.as_mut() {
            let after = marginal_loglik(data, spec, &new_params, &grid)?;
            tr.push((stats.loglik, after));
        }

        let delta = (&new_params.pack(spec) - &old_packed).amax();
        params = new_params;
        grid = build_grid(spec, &params, m)?;
        stats = e_step(data, spec, &params, &grid, &layout)?;
        let prev_ll = *trace.last().unwrap();
        trace.push(stats.loglik);
        let dll = (stats.loglik - prev_ll).abs();
        if delta < options.param_tol && dll < options.loglik_tol {
            converged = true;
            reason = format!(
                "max parameter change {delta:.3e} < {:.1e} and log-likelihood change \
                 {dll:.3e} < {:.1e}",
                options.param_tol, options.loglik_tol
            );
            break;
        }
    }
    if !converged {
        reason = format!(
            "iteration cap of {} reached before both tolerances were met",
            options.max_iterations
        );
    }

    let loglik = *trace.last().unwrap();
    let k = spec.n_free_parameters() as f64;
    let n = data.n();
    let (se, mut se_warnings) = if options.compute_standard_errors {
        let out = standard_errors(data, spec, &params, &grid)?;
        (out.se, out.warnings)
    } else {
        (None, Vec::new())
    };
    warnings.append(&mut se_warnings);

    Ok(FitResult {
        params,
        loglik_trace: trace,
        converged,
        convergence_reason: reason,
        iterations,
        standard_errors: se,
        warnings,
        aic: -2.0 * loglik + 2.0 * k,
        bic: -2.0 * loglik + k * (n as f64).ln(),
        n_free_parameters: spec.n_free_parameters(),
        n,
        fixed_grid_ascent: ascent,
    })
}
