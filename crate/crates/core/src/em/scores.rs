//! Expected score functions: posterior expectations of the complete-data
//! score, one individual at a time. These equal the exact gradient of the
//! grid-evaluated marginal log-likelihood, which the gradient tests exploit.

use nalgebra::{DMatrix, DVector};

use crate::dist::logistic;
use crate::error::{Error, Result};
use crate::model::{Family, LoadingScheme, ModelSpec, PanelDataset, ParameterSet};
use crate::quad::{posterior_weights, QuadratureGrid};

fn psi_cholesky(
    spec: &ModelSpec,
    params: &ParameterSet,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    params
        .psi(spec)
        .cholesky()
        .ok_or_else(|| Error::not_pd("latent covariance", ""))
}

/// Expected score for the latent mean: sum_g w_g Psi^{-1} (eta_g - mu).
/// Factor components are returned but never drive an update.
pub fn expected_score_mu(
    data: &PanelDataset,
    i: usize,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
) -> Result<DVector<f64>> {
    let chol = psi_cholesky(spec, params)?;
    let (w, _) = posterior_weights(data, i, spec, params, grid)?;
    let mu = params.mu_eta(spec);
    let mut mean_dev = DVector::zeros(spec.latent_dim());
    for g in 0..grid.n_nodes() {
        mean_dev += w[g] * (grid.node_vector(g) - &mu);
    }
    Ok(chol.solve(&mean_dev))
}

/// Expected score for the latent covariance:
/// sum_g w_g [ -1/2 Psi^{-1} + 1/2 Psi^{-1} (eta-mu)(eta-mu)' Psi^{-1} ].
pub fn expected_score_psi(
    data: &PanelDataset,
    i: usize,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
) -> Result<DMatrix<f64>> {
    let d = spec.latent_dim();
    let chol = psi_cholesky(spec, params)?;
    let (w, _) = posterior_weights(data, i, spec, params, grid)?;
    let mu = params.mu_eta(spec);
    let mut m = DMatrix::zeros(d, d);
    for g in 0..grid.n_nodes() {
        let dev = grid.node_vector(g) - &mu;
        m += w[g] * &dev * dev.transpose();
    }
    // Psi^{-1} M Psi^{-1} via two triangular solves
    let left = chol.solve(&m);
    let both = chol.solve(&left.transpose());
    let psi_inv = chol.inverse();
    let score = 0.5 * (both - psi_inv);
    Ok(0.5 * (&score + score.transpose()))
}

/// Gradient of one cell's predictor with respect to the item's free
/// measurement parameters (loadings then covariate coefficients).
pub(crate) struct ItemFree {
    pub item: usize,
    pub n_load_rows: usize,
    pub q: usize,
    pub n_cov: usize,
    pub occasions: usize,
}

impl ItemFree {
    pub fn new(spec: &ModelSpec, item: usize) -> Self {
        let it = &spec.items[item];
        let n_load_rows = match spec.loading_scheme {
            LoadingScheme::TimeInvariant => 1,
            LoadingScheme::TimeVarying => it.occasions,
        };
        ItemFree {
            item,
            n_load_rows,
            q: spec.n_factors,
            n_cov: it.covariates.len(),
            occasions: it.occasions,
        }
    }

    pub fn n_loadings(&self) -> usize {
        self.n_load_rows * self.q
    }

    #[inline]
    pub fn loading_index(&self, occasion: usize, k: usize) -> usize {
        let row = if self.n_load_rows == 1 { 0 } else { occasion };
        row * self.q + k
    }
}

/// Per-cell predictor pieces on a grid: the growth part (independent of the
/// measurement parameters) and the factor part of each node.
pub(crate) fn growth_part(
    spec: &ModelSpec,
    item: usize,
    occasion: usize,
    node: &[f64],
) -> f64 {
    let it = &spec.items[item];
    let off = spec.growth_offset(item);
    let lam_t = it.time_scores[occasion];
    let mut acc = 0.0;
    let mut pow = 1.0;
    for r in 0..it.growth_dim() {
        acc += node[off + r] * pow;
        pow *= lam_t;
    }
    acc
}

fn predictor_at_node(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &PanelDataset,
    i: usize,
    item: usize,
    occasion: usize,
    node: &[f64],
) -> f64 {
    let foff = spec.factor_offset();
    let mut v = growth_part(spec, item, occasion, node);
    for k in 0..spec.n_factors {
        v += params.loading(spec, item, occasion, k) * node[foff + k];
    }
    for (l, x) in data.items[item].covariates.iter().enumerate() {
        v += params.gamma[item][(occasion, l)] * x[(i, occasion)];
    }
    v
}

/// Expected score for a binomial item's loadings:
/// sum_g w_g sum_t z_g (y_t - n_t p(v_tg)); per-occasion rows (the sum over
/// t dropped) under time-varying loadings.
pub fn score_binomial_loading(
    data: &PanelDataset,
    i: usize,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    item: usize,
) -> Result<DVector<f64>> {
    if spec.items[item].family != Family::Binomial {
        return Err(Error::input(format!(
            "item {} is not binomial",
            spec.items[item].name
        )));
    }
    let free = ItemFree::new(spec, item);
    let (w, _) = posterior_weights(data, i, spec, params, grid)?;
    let mut score = DVector::zeros(free.n_loadings());
    let foff = spec.factor_offset();
    for g in 0..grid.n_nodes() {
        let node = grid.node(g);
        for t in 0..spec.items[item].occasions {
            let v = predictor_at_node(spec, params, data, i, item, t, node);
            let resid = data.value(i, item, t)
                - spec.items[item].trials[t] as f64 * logistic(v);
            for k in 0..spec.n_factors {
                score[free.loading_index(t, k)] += w[g] * node[foff + k] * resid;
            }
        }
    }
    Ok(score)
}

/// Expected score for a normal item's loadings:
/// sum_g w_g sum_t z_g (y_t - v_tg) / sigma2_t.
pub fn score_normal_loading(
    data: &PanelDataset,
    i: usize,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    item: usize,
) -> Result<DVector<f64>> {
    if spec.items[item].family != Family::Normal {
        return Err(Error::input(format!(
            "item {} is not normal",
            spec.items[item].name
        )));
    }
    let free = ItemFree::new(spec, item);
    let (w, _) = posterior_weights(data, i, spec, params, grid)?;
    let mut score = DVector::zeros(free.n_loadings());
    let foff = spec.factor_offset();
    for g in 0..grid.n_nodes() {
        let node = grid.node(g);
        for t in 0..spec.items[item].occasions {
            let v = predictor_at_node(spec, params, data, i, item, t, node);
            let resid = (data.value(i, item, t) - v) / params.sigma2_at(spec, item, t);
            for k in 0..spec.n_factors {
                score[free.loading_index(t, k)] += w[g] * node[foff + k] * resid;
            }
        }
    }
    Ok(score)
}

/// Expected score for a normal item's residual variances: per free variance
/// parameter, sum_g w_g [ (y - v)^2 - sigma2 ] / (2 sigma2^2), summed over
/// the occasions the parameter covers.
pub fn score_sigma2(
    data: &PanelDataset,
    i: usize,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    item: usize,
) -> Result<Vec<f64>> {
    let it = &spec.items[item];
    if it.family != Family::Normal {
        return Err(Error::input(format!("item {} is not normal", it.name)));
    }
    let (w, _) = posterior_weights(data, i, spec, params, grid)?;
    let mut score = vec![0.0; it.sigma2_len()];
    for g in 0..grid.n_nodes() {
        let node = grid.node(g);
        for t in 0..it.occasions {
            let s2 = params.sigma2_at(spec, item, t);
            let v = predictor_at_node(spec, params, data, i, item, t, node);
            let r = data.value(i, item, t) - v;
            let contrib = w[g] * (r * r - s2) / (2.0 * s2 * s2);
            let idx = match it.variance_scheme {
                crate::model::VarianceScheme::Heteroscedastic => t,
                crate::model::VarianceScheme::Homoscedastic => 0,
            };
            score[idx] += contrib;
        }
    }
    Ok(score)
}

/// Expected score for an item's covariate coefficients, occasions x
/// covariates: the binomial and normal residual forms with the covariate in
/// place of the factor.
pub fn score_covariates(
    data: &PanelDataset,
    i: usize,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    item: usize,
) -> Result<DMatrix<f64>> {
    let it = &spec.items[item];
    let (w, _) = posterior_weights(data, i, spec, params, grid)?;
    let mut score = DMatrix::zeros(it.occasions, it.covariates.len());
    for g in 0..grid.n_nodes() {
        let node = grid.node(g);
        for t in 0..it.occasions {
            let v = predictor_at_node(spec, params, data, i, item, t, node);
            let y = data.value(i, item, t);
            let resid = match it.family {
                Family::Binomial => y - it.trials[t] as f64 * logistic(v),
                Family::Normal => (y - v) / params.sigma2_at(spec, item, t),
            };
            for l in 0..it.covariates.len() {
                let x = data.items[item].covariates[l][(i, t)];
                score[(t, l)] += w[g] * x * resid;
            }
        }
    }
    Ok(score)
}

/// All expected scores summed over individuals and stacked in the canonical
/// packed-parameter order. Equals the gradient of the grid-evaluated
/// marginal log-likelihood in the packed coordinates (off-diagonal
/// covariance entries carry the symmetric-perturbation factor of two).
pub fn stacked_expected_score(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
) -> Result<DVector<f64>> {
    let b = spec.growth_dim();
    let mut total = DVector::zeros(spec.n_free_parameters());
    for i in 0..data.n() {
        let mut pos = 0usize;
        let mu = expected_score_mu(data, i, spec, params, grid)?;
        for r in 0..b {
            total[pos + r] += mu[r];
        }
        pos += b;
        let psi = expected_score_psi(data, i, spec, params, grid)?;
        for r in 0..b {
            for c in 0..=r {
                let factor = if r == c { 1.0 } else { 2.0 };
                total[pos] += factor * psi[(r, c)];
                pos += 1;
            }
        }
        for j in 0..spec.n_items() {
            let free = ItemFree::new(spec, j);
            if free.n_loadings() > 0 {
                let s = match spec.items[j].family {
                    Family::Binomial => score_binomial_loading(data, i, spec, params, grid, j)?,
                    Family::Normal => score_normal_loading(data, i, spec, params, grid, j)?,
                };
                for k in 0..s.len() {
                    total[pos + k] += s[k];
                }
            }
            pos += free.n_loadings();
        }
        for j in 0..spec.n_items() {
            if spec.items[j].family == Family::Normal {
                let s = score_sigma2(data, i, spec, params, grid, j)?;
                for (k, v) in s.iter().enumerate() {
                    total[pos + k] += v;
                }
            }
            pos += spec.items[j].sigma2_len();
        }
        for j in 0..spec.n_items() {
            let it = &spec.items[j];
            if !it.covariates.is_empty() {
                let s = score_covariates(data, i, spec, params, grid, j)?;
                for t in 0..it.occasions {
                    for l in 0..it.covariates.len() {
                        total[pos + t * it.covariates.len() + l] += s[(t, l)];
                    }
                }
            }
            pos += it.occasions * it.covariates.len();
        }
        debug_assert_eq!(pos, total.len());
    }
    Ok(total)
}
