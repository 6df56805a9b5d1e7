//! Gauss-Hermite machinery for the marginal likelihood and the posterior
//! expectations behind the E-step.
//!
//! The latent prior is handled through the Cholesky factor of its covariance:
//! standard physicists' nodes `u` are mapped to `eta = mu + sqrt(2) C u`, so
//! that integrating against the prior reduces to a weighted sum with weights
//! normalized to one. Evaluation at parameter values other than the grid's
//! generating ones reweights each node by the prior ratio, which keeps one
//! E+M cycle on a frozen grid an exact EM step for the discretized
//! likelihood.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::compensated_sum;
use crate::dist::{self, LnChooseTable, LN_2PI};
use crate::error::{Error, Result};
use crate::model::{Family, ModelSpec, PanelDataset, ParameterSet};

const MAX_NODES: usize = 4_000_000;
pub(crate) const CHUNK: usize = 256;

/// One-dimensional physicists' Gauss-Hermite rule (weight e^{-u^2}) computed
/// by Golub-Welsch; nodes symmetric about zero, weights positive.
pub fn gauss_hermite_rule(m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m < 1 || m > 50 {
        return Err(Error::input(format!(
            "quadrature order must be in 1..=50, got {m}"
        )));
    }
    if m == 1 {
        return Ok((vec![0.0], vec![std::f64::consts::PI.sqrt()]));
    }
    let mut jac = DMatrix::zeros(m, m);
    for k in 1..m {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|k| {
            let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, k)].powi(2);
            (eig.eigenvalues[k], w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    // enforce exact symmetry of the computed rule
    for i in 0..m / 2 {
        let j = m - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }
    Ok((nodes, weights))
}

/// Evaluates the latent log-prior repeatedly under one covariance
/// factorization. All grid code paths share this so that prior ratios cancel
/// exactly when parameters coincide.
struct PriorEvaluator {
    mu: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
    dim: usize,
}

impl PriorEvaluator {
    fn new(spec: &ModelSpec, params: &ParameterSet) -> Result<Self> {
        let psi = params.psi(spec);
        let chol = psi.cholesky().ok_or_else(|| {
            Error::not_pd(
                "latent covariance",
                "growth covariance block (psi_beta) admits no Cholesky factor",
            )
        })?;
        let log_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
        Ok(PriorEvaluator {
            mu: params.mu_eta(spec),
            log_det,
            dim: spec.latent_dim(),
            chol,
        })
    }

    fn logpdf(&self, eta: &DVector<f64>) -> f64 {
        let diff = eta - &self.mu;
        let solved = self.chol.solve(&diff);
        -0.5 * (self.dim as f64 * LN_2PI + self.log_det + diff.dot(&solved))
    }
}

/// Tensor-product Gauss-Hermite grid transformed through the latent prior of
/// the parameters it was built from.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    /// Per-dimension order m.
    pub order: usize,
    /// Latent dimension d.
    pub dim: usize,
    n_nodes: usize,
    /// Standard nodes u, row-major G x d.
    std_nodes: Vec<f64>,
    /// Log-weights normalized so that sum(exp) = 1.
    pub log_weights: Vec<f64>,
    /// Transformed nodes eta = mu + sqrt(2) C u, row-major G x d.
    nodes: Vec<f64>,
    /// log h(eta_g) under the generating parameters.
    self_log_prior: Vec<f64>,
    /// Lower Cholesky factor of the generating covariance (block-diagonal:
    /// chol(psi_beta) and the identity factor block).
    pub chol_l: DMatrix<f64>,
}

impl QuadratureGrid {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Transformed node g as a slice over the canonical latent layout.
    #[inline]
    pub fn node(&self, g: usize) -> &[f64] {
        &self.nodes[g * self.dim..(g + 1) * self.dim]
    }

    pub fn node_vector(&self, g: usize) -> DVector<f64> {
        DVector::from_column_slice(self.node(g))
    }

    #[inline]
    pub fn std_node(&self, g: usize) -> &[f64] {
        &self.std_nodes[g * self.dim..(g + 1) * self.dim]
    }

    /// Log-weights reweighted by the prior ratio h(eta; params) / h(eta;
    /// generating params). Identical parameters give back `log_weights`
    /// exactly; this is what every evaluation routine uses so that frozen
    /// grids stay exact EM surrogates.
    pub fn adjusted_log_weights(
        &self,
        spec: &ModelSpec,
        params: &ParameterSet,
    ) -> Result<Vec<f64>> {
        let prior = PriorEvaluator::new(spec, params)?;
        Ok((0..self.n_nodes)
            .map(|g| {
                self.log_weights[g] + prior.logpdf(&self.node_vector(g)) - self.self_log_prior[g]
            })
            .collect())
    }
}

/// Builds the tensor grid for the latent prior implied by `params`.
/// Integration of any polynomial of total degree <= 2m - 1 against the prior
/// is exact up to roundoff.
pub fn build_grid(spec: &ModelSpec, params: &ParameterSet, m: usize) -> Result<QuadratureGrid> {
    let d = spec.latent_dim();
    let (nodes1, weights1) = gauss_hermite_rule(m)?;
    let n_nodes = m
        .checked_pow(d as u32)
        .filter(|&g| g <= MAX_NODES)
        .ok_or_else(|| {
            Error::input(format!(
                "grid of {m}^{d} nodes exceeds the supported maximum of {MAX_NODES}"
            ))
        })?;
    let b = spec.growth_dim();
    let chol_beta = params.psi_beta.clone().cholesky().ok_or_else(|| {
        Error::not_pd("growth covariance block (psi_beta)", "")
    })?;
    let mut chol_l = DMatrix::zeros(d, d);
    chol_l.view_mut((0, 0), (b, b)).copy_from(&chol_beta.l());
    for k in 0..spec.n_factors {
        chol_l[(b + k, b + k)] = 1.0;
    }
    let mu = params.mu_eta(spec);
    let prior = PriorEvaluator::new(spec, params)?;

    let log_w1: Vec<f64> = weights1.iter().map(|w| w.ln()).collect();
    let half_log_pi = 0.5 * std::f64::consts::PI.ln();
    let sqrt2 = std::f64::consts::SQRT_2;

    let mut std_nodes = vec![0.0; n_nodes * d];
    let mut log_weights = vec![0.0; n_nodes];
    let mut nodes = vec![0.0; n_nodes * d];
    let mut self_log_prior = vec![0.0; n_nodes];
    let mut index = vec![0usize; d];
    let mut u = DVector::zeros(d);
    for g in 0..n_nodes {
        let mut lw = -(d as f64) * half_log_pi;
        for k in 0..d {
            u[k] = nodes1[index[k]];
            lw += log_w1[index[k]];
        }
        log_weights[g] = lw;
        std_nodes[g * d..(g + 1) * d].copy_from_slice(u.as_slice());
        let eta = &mu + &chol_l * &u * sqrt2;
        nodes[g * d..(g + 1) * d].copy_from_slice(eta.as_slice());
        self_log_prior[g] = prior.logpdf(&eta);
        // advance the multi-index, last dimension fastest
        for k in (0..d).rev() {
            index[k] += 1;
            if index[k] < m {
                break;
            }
            index[k] = 0;
        }
    }
    Ok(QuadratureGrid {
        order: m,
        dim: d,
        n_nodes,
        std_nodes,
        log_weights,
        nodes,
        self_log_prior,
        chol_l,
    })
}

/// Posterior node weights and the log marginal contribution of one
/// individual: weight_g is proportional to the adjusted prior weight times
/// the conditional likelihood, computed with a max shift in log space.
pub fn posterior_weights(
    data: &PanelDataset,
    i: usize,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
) -> Result<(Vec<f64>, f64)> {
    let alw = grid.adjusted_log_weights(spec, params)?;
    let mut logs = Vec::with_capacity(grid.n_nodes());
    for g in 0..grid.n_nodes() {
        let eta = grid.node_vector(g);
        logs.push(alw[g] + dist::conditional_loglik(data, i, &eta, spec, params)?);
    }
    normalize_log_weights(&mut logs).map(|logmarg| (logs, logmarg))
}

/// In-place exp-normalization of unnormalized log weights; returns the
/// log-sum. Errors only if every weight is impossible even after shifting.
pub(crate) fn normalize_log_weights(logs: &mut [f64]) -> Result<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(
            "all posterior weights vanished; the conditional likelihood is \
             impossible at every quadrature node"
                .into(),
        ));
    }
    let mut sum = 0.0;
    for l in logs.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logs.iter_mut() {
        *l /= sum;
    }
    Ok(max + sum.ln())
}

/// Marginal log-likelihood of the panel under `params`, evaluated on `grid`
/// (the grid's own parameters need not match; the prior-ratio adjustment
/// keeps the surrogate consistent). Individuals are processed in parallel
/// with a deterministic ordered reduction.
pub fn marginal_loglik(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let eval = BulkEvaluator::new(data, spec, params, grid)?;
    let n = data.n();
    let indices: Vec<usize> = (0..n).collect();
    let per_chunk: Vec<Vec<Result<f64>>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut buf = vec![0.0; grid.n_nodes()];
            let mut out = Vec::with_capacity(chunk.len());
            for &i in chunk {
                eval.fill_log_posterior(i, &mut buf);
                out.push(normalize_log_weights(&mut buf).map(|lm| lm + eval.const_term(i)));
            }
            out
        })
        .collect();
    let mut values = Vec::with_capacity(n);
    for chunk in per_chunk {
        for r in chunk {
            values.push(r?);
        }
    }
    Ok(compensated_sum(values))
}

enum CellKind {
    /// y * v with the n log(1+e^v) part folded into a per-node constant.
    BinomialPlain,
    /// Full per-individual evaluation (covariate offsets shift v).
    BinomialCov { trials: f64 },
    NormalPlain { inv_2s2: f64 },
    NormalCov { inv_2s2: f64 },
}

struct Cell {
    item: usize,
    occasion: usize,
    kind: CellKind,
}

/// Shared fast path for likelihood evaluation over a whole panel: the latent
/// part of every cell's predictor is precomputed per node, so the per-
/// individual work is a handful of flops per node.
pub(crate) struct BulkEvaluator<'a> {
    data: &'a PanelDataset,
    grid: &'a QuadratureGrid,
    cells: Vec<Cell>,
    /// Latent predictor per cell per node, cell-major.
    vtab: Vec<f64>,
    /// Adjusted log weight plus the node constants of plain binomial cells.
    base: Vec<f64>,
    /// Per-individual additive constant (log binomial coefficients plus the
    /// normal normalization terms).
    const_i: Vec<f64>,
    /// Covariate coefficients per item, needed for per-individual offsets.
    gamma: Vec<DMatrix<f64>>,
}

impl<'a> BulkEvaluator<'a> {
    pub(crate) fn new(
        data: &'a PanelDataset,
        spec: &'a ModelSpec,
        params: &'a ParameterSet,
        grid: &'a QuadratureGrid,
    ) -> Result<Self> {
        if data.n() == 0 {
            return Err(Error::input("empty panel"));
        }
        let alw = grid.adjusted_log_weights(spec, params)?;
        let n_nodes = grid.n_nodes();
        let mut cells = Vec::new();
        let mut norm_const = 0.0;
        for (j, item) in spec.items.iter().enumerate() {
            let has_cov = !item.covariates.is_empty();
            for t in 0..item.occasions {
                let kind = match item.family {
                    Family::Binomial => {
                        if has_cov {
                            CellKind::BinomialCov {
                                trials: item.trials[t] as f64,
                            }
                        } else {
                            CellKind::BinomialPlain
                        }
                    }
                    Family::Normal => {
                        let s2 = params.sigma2_at(spec, j, t);
                        if s2 <= 0.0 {
                            return Err(Error::input(format!(
                                "item {}: nonpositive residual variance at occasion {}",
                                item.name,
                                t + 1
                            )));
                        }
                        norm_const += -0.5 * (LN_2PI + s2.ln());
                        let inv_2s2 = 1.0 / (2.0 * s2);
                        if has_cov {
                            CellKind::NormalCov { inv_2s2 }
                        } else {
                            CellKind::NormalPlain { inv_2s2 }
                        }
                    }
                };
                cells.push(Cell {
                    item: j,
                    occasion: t,
                    kind,
                });
            }
        }

        // latent part of v per (cell, node)
        let mut vtab = vec![0.0; cells.len() * n_nodes];
        for (c, cell) in cells.iter().enumerate() {
            let w = crate::model::design_row(spec, params, cell.item, cell.occasion)?;
            let col = &mut vtab[c * n_nodes..(c + 1) * n_nodes];
            for (g, vg) in col.iter_mut().enumerate() {
                let node = grid.node(g);
                let mut acc = 0.0;
                for (wk, nk) in w.iter().zip(node.iter()) {
                    acc += wk * nk;
                }
                *vg = acc;
            }
        }

        // node constants: adjusted log weight minus the plain binomial
        // normalizers n_t log(1 + e^v)
        let mut base = alw;
        for (c, cell) in cells.iter().enumerate() {
            if matches!(cell.kind, CellKind::BinomialPlain) {
                let nt = spec.items[cell.item].trials[cell.occasion] as f64;
                let col = &vtab[c * n_nodes..(c + 1) * n_nodes];
                for (bg, &v) in base.iter_mut().zip(col.iter()) {
                    *bg -= nt * dist::log1pexp(v);
                }
            }
        }

        // per-individual constants
        let mut tables: Vec<Option<LnChooseTable>> = Vec::with_capacity(cells.len());
        for cell in &cells {
            let item = &spec.items[cell.item];
            tables.push(match item.family {
                Family::Binomial => Some(LnChooseTable::for_trials(item.trials[cell.occasion])),
                Family::Normal => None,
            });
        }
        let const_i: Vec<f64> = (0..data.n())
            .map(|i| {
                let mut acc = norm_const;
                for (c, cell) in cells.iter().enumerate() {
                    if let Some(tab) = &tables[c] {
                        acc += tab.get(data.value(i, cell.item, cell.occasion) as u32);
                    }
                }
                acc
            })
            .collect();

        Ok(BulkEvaluator {
            data,
            grid,
            cells,
            vtab,
            base,
            const_i,
            gamma: params.gamma.clone(),
        })
    }

    /// Fills `out[g]` with the unnormalized log posterior weight of node g
    /// for individual i, up to the additive [`Self::const_term`].
    pub(crate) fn fill_log_posterior(&self, i: usize, out: &mut [f64]) {
        let n_nodes = self.grid.n_nodes();
        out.copy_from_slice(&self.base);
        for (c, cell) in self.cells.iter().enumerate() {
            let y = self.data.value(i, cell.item, cell.occasion);
            let col = &self.vtab[c * n_nodes..(c + 1) * n_nodes];
            match cell.kind {
                CellKind::BinomialPlain => {
                    for (og, &v) in out.iter_mut().zip(col.iter()) {
                        *og += y * v;
                    }
                }
                CellKind::BinomialCov { trials } => {
                    let off = self.cov_offset(i, cell);
                    for (og, &v) in out.iter_mut().zip(col.iter()) {
                        let vv = v + off;
                        *og += y * vv - trials * dist::log1pexp(vv);
                    }
                }
                CellKind::NormalPlain { inv_2s2 } => {
                    for (og, &v) in out.iter_mut().zip(col.iter()) {
                        let r = y - v;
                        *og -= r * r * inv_2s2;
                    }
                }
                CellKind::NormalCov { inv_2s2 } => {
                    let off = self.cov_offset(i, cell);
                    for (og, &v) in out.iter_mut().zip(col.iter()) {
                        let r = y - v - off;
                        *og -= r * r * inv_2s2;
                    }
                }
            }
        }
    }

    fn cov_offset(&self, i: usize, cell: &Cell) -> f64 {
        let mut off = 0.0;
        let gamma = &self.gamma[cell.item];
        for (l, x) in self.data.items[cell.item].covariates.iter().enumerate() {
            off += gamma[(cell.occasion, l)] * x[(i, cell.occasion)];
        }
        off
    }

    pub(crate) fn const_term(&self, i: usize) -> f64 {
        self.const_i[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ItemData, ItemSpec, LoadingScheme};
    use approx::assert_relative_eq;

    #[test]
    fn rule_order_one_and_two_closed_forms() {
        let (n1, w1) = gauss_hermite_rule(1).unwrap();
        assert_eq!(n1, vec![0.0]);
        assert_relative_eq!(w1[0], std::f64::consts::PI.sqrt(), max_relative = 1e-14);

        let (n2, w2) = gauss_hermite_rule(2).unwrap();
        let r = 0.5f64.sqrt();
        assert_relative_eq!(n2[0], -r, max_relative = 1e-12);
        assert_relative_eq!(n2[1], r, max_relative = 1e-12);
        let half = 0.5 * std::f64::consts::PI.sqrt();
        assert_relative_eq!(w2[0], half, max_relative = 1e-12);
        assert_relative_eq!(w2[1], half, max_relative = 1e-12);
    }

    #[test]
    fn rule_rejects_bad_order() {
        assert!(gauss_hermite_rule(0).is_err());
        assert!(gauss_hermite_rule(51).is_err());
    }

    #[test]
    fn rule_second_moment_identity() {
        // integral of u^2 e^{-u^2} du = sqrt(pi)/2
        let (nodes, weights) = gauss_hermite_rule(10).unwrap();
        let m2: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(u, w)| u * u * w)
            .sum();
        assert_relative_eq!(m2, 0.5 * std::f64::consts::PI.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn rule_symmetry_and_positivity() {
        for m in 1..=50 {
            let (nodes, weights) = gauss_hermite_rule(m).unwrap();
            assert!(weights.iter().all(|&w| w > 0.0), "m = {m}");
            for i in 0..m {
                assert_eq!(nodes[i], -nodes[m - 1 - i], "m = {m}, i = {i}");
            }
        }
    }

    fn scalar_spec() -> (ModelSpec, ParameterSet) {
        let spec = ModelSpec::new(
            vec![ItemSpec::normal("y", 1, 0)],
            0,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let params = ParameterSet::neutral(&spec);
        (spec, params)
    }

    #[test]
    fn grid_scalar_second_moment_exact_at_order_two() {
        let (spec, params) = scalar_spec();
        let grid = build_grid(&spec, &params, 2).unwrap();
        let m2: f64 = (0..grid.n_nodes())
            .map(|g| grid.log_weights[g].exp() * grid.node(g)[0].powi(2))
            .sum();
        assert_relative_eq!(m2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_weights_normalized() {
        let (spec, params) = scalar_spec();
        for m in [1, 3, 7, 20] {
            let grid = build_grid(&spec, &params, m).unwrap();
            let total: f64 = grid.log_weights.iter().map(|l| l.exp()).sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn grid_correlated_cross_moment() {
        // two growth coefficients with correlation 0.8
        let spec = ModelSpec::new(
            vec![ItemSpec::normal("y", 2, 1)],
            0,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let mut params = ParameterSet::neutral(&spec);
        params.psi_beta = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]);
        let grid = build_grid(&spec, &params, 6).unwrap();
        let m12: f64 = (0..grid.n_nodes())
            .map(|g| {
                let node = grid.node(g);
                grid.log_weights[g].exp() * node[0] * node[1]
            })
            .sum();
        assert_relative_eq!(m12, 0.8, epsilon = 1e-10);
    }

    #[test]
    fn grid_reproduces_published_covariance() {
        // degree-2 exactness reproduces the full 5x5 latent covariance
        let spec = crate::model::tests::two_item_spec();
        let params = crate::model::tests::table_params();
        let grid = build_grid(&spec, &params, 4).unwrap();
        let mu = params.mu_eta(&spec);
        let psi = params.psi(&spec);
        let d = spec.latent_dim();
        let mut acc = DMatrix::zeros(d, d);
        for g in 0..grid.n_nodes() {
            let eta = grid.node_vector(g) - &mu;
            acc += grid.log_weights[g].exp() * &eta * eta.transpose();
        }
        for r in 0..d {
            for c in 0..d {
                assert_relative_eq!(acc[(r, c)], psi[(r, c)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn grid_names_offending_block_when_not_pd() {
        let spec = crate::model::tests::two_item_spec();
        let mut params = crate::model::tests::table_params();
        params.psi_beta[(0, 0)] = -1.0;
        let err = build_grid(&spec, &params, 3).unwrap_err();
        assert!(err.to_string().contains("psi_beta"), "{err}");
    }

    fn tiny_normal_panel(spec: &ModelSpec, values: Vec<f64>, occasions: usize) -> PanelDataset {
        let n = values.len() / occasions;
        PanelDataset::new(
            spec,
            (0..n).map(|i| format!("{}", i + 1)).collect(),
            vec![ItemData {
                values: DMatrix::from_row_slice(n, occasions, &values),
                covariates: vec![],
            }],
        )
        .unwrap()
    }

    #[test]
    fn posterior_matches_conjugate_closed_form() {
        // single normal item with identity loading on its random intercept:
        // the normal-normal posterior mean is available in closed form
        let spec = ModelSpec::new(
            vec![ItemSpec::normal("y", 3, 0)],
            0,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let mut params = ParameterSet::neutral(&spec);
        params.mu_beta[0] = 1.2;
        params.psi_beta[(0, 0)] = 1.0;
        params.sigma2[0] = vec![3.0, 3.0, 3.0];
        let data = tiny_normal_panel(&spec, vec![2.0, 2.6, 1.4], 3);
        let grid = build_grid(&spec, &params, 30).unwrap();
        let (w, _) = posterior_weights(&data, 0, &spec, &params, &grid).unwrap();
        let post_mean: f64 = (0..grid.n_nodes()).map(|g| w[g] * grid.node(g)[0]).sum();
        let (mu0, psi, s2, t) = (1.2, 1.0, 3.0, 3.0);
        let ybar = (2.0 + 2.6 + 1.4) / 3.0;
        let expect = (mu0 / psi + t * ybar / s2) / (1.0 / psi + t / s2);
        assert_relative_eq!(post_mean, expect, epsilon = 1e-6);
        let total: f64 = w.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_reduces_to_prior_when_likelihood_flat() {
        // loadings zero and a nearly degenerate growth prior make the
        // conditional likelihood effectively constant in the latent vector
        let spec = ModelSpec::new(
            vec![ItemSpec::binomial("c", vec![6, 6], 0)],
            1,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let mut params = ParameterSet::neutral(&spec);
        params.loadings[0][(0, 0)] = 0.0;
        params.psi_beta[(0, 0)] = 1e-14;
        let data = PanelDataset::new(
            &spec,
            vec!["a".into()],
            vec![ItemData {
                values: DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
                covariates: vec![],
            }],
        )
        .unwrap();
        let grid = build_grid(&spec, &params, 7).unwrap();
        let (w, _) = posterior_weights(&data, 0, &spec, &params, &grid).unwrap();
        for g in 0..grid.n_nodes() {
            assert_relative_eq!(w[g], grid.log_weights[g].exp(), epsilon = 1e-6);
        }
    }

    #[test]
    fn marginal_single_individual_and_additivity() {
        let spec = ModelSpec::new(
            vec![ItemSpec::normal("y", 2, 0)],
            0,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let mut params = ParameterSet::neutral(&spec);
        params.sigma2[0] = vec![1.3, 0.7];
        let one = tiny_normal_panel(&spec, vec![0.4, -0.2], 2);
        let grid = build_grid(&spec, &params, 15).unwrap();
        let l1 = marginal_loglik(&one, &spec, &params, &grid).unwrap();
        let (_, lm) = posterior_weights(&one, 0, &spec, &params, &grid).unwrap();
        assert_relative_eq!(l1, lm, epsilon = 1e-12);

        let two = tiny_normal_panel(&spec, vec![0.4, -0.2, 0.4, -0.2], 2);
        let l2 = marginal_loglik(&two, &spec, &params, &grid).unwrap();
        assert_eq!(l2, 2.0 * l1);
    }

    #[test]
    fn marginal_matches_dense_trapezoid_oracle() {
        // 1 binomial item, 1 occasion, 1 factor: d = 2; the oracle is a
        // dense tensor trapezoid over +-10 prior sd in each dimension
        let spec = ModelSpec::new(
            vec![ItemSpec::binomial("c", vec![8], 0)],
            1,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let mut params = ParameterSet::neutral(&spec);
        params.mu_beta[0] = 0.3;
        params.psi_beta[(0, 0)] = 0.5;
        params.loadings[0][(0, 0)] = 0.8;
        let values = vec![3.0, 7.0, 0.0, 5.0, 6.0, 2.0];
        let data = PanelDataset::new(
            &spec,
            (0..6).map(|i| format!("{}", i + 1)).collect(),
            vec![ItemData {
                values: DMatrix::from_row_slice(6, 1, &values),
                covariates: vec![],
            }],
        )
        .unwrap();
        let grid = build_grid(&spec, &params, 15).unwrap();
        let ours = marginal_loglik(&data, &spec, &params, &grid).unwrap();

        let sd0 = 0.5f64.sqrt();
        let k = 320usize;
        let (h0, h1) = (20.0 * sd0 / k as f64, 20.0 / k as f64);
        let mut oracle = 0.0;
        for (i, &y) in values.iter().enumerate() {
            let _ = i;
            let mut total = 0.0;
            for a in 0..=k {
                let beta = 0.3 - 10.0 * sd0 + a as f64 * h0;
                let pb = (-0.5 * LN_2PI - 0.5 * 0.5f64.ln()
                    - (beta - 0.3).powi(2) / (2.0 * 0.5))
                    .exp();
                let wa = if a == 0 || a == k { 0.5 } else { 1.0 };
                for bix in 0..=k {
                    let z = -10.0 + bix as f64 * h1;
                    let pz = (-0.5 * LN_2PI - z * z / 2.0).exp();
                    let wb = if bix == 0 || bix == k { 0.5 } else { 1.0 };
                    let v = beta + 0.8 * z;
                    let g = dist::binomial_logpmf(y as u32, 8, v).unwrap().exp();
                    total += wa * wb * pb * pz * g;
                }
            }
            oracle += (total * h0 * h1).ln();
        }
        assert!(
            (ours - oracle).abs() < 1e-6,
            "quadrature {ours} vs oracle {oracle}"
        );
    }

    #[test]
    fn marginal_invariant_under_individual_permutation() {
        let spec = crate::model::tests::two_item_spec();
        let params = crate::model::tests::table_params();
        let data = crate::sim::simulate_dataset(&crate::sim::SimConfig {
            n: 60,
            seed: 7,
            spec: spec.clone(),
            params: params.clone(),
            covariate_gen: None,
        })
        .unwrap()
        .0;
        let grid = build_grid(&spec, &params, 4).unwrap();
        let base = marginal_loglik(&data, &spec, &params, &grid).unwrap();
        // reverse the individuals
        let rev = PanelDataset {
            ids: data.ids.iter().rev().cloned().collect(),
            items: data
                .items
                .iter()
                .map(|it| ItemData {
                    values: DMatrix::from_fn(it.values.nrows(), it.values.ncols(), |r, c| {
                        it.values[(it.values.nrows() - 1 - r, c)]
                    }),
                    covariates: vec![],
                })
                .collect(),
        };
        let perm = marginal_loglik(&rev, &spec, &params, &grid).unwrap();
        assert_relative_eq!(base, perm, epsilon = 1e-10);
    }

    #[test]
    fn fast_and_direct_paths_agree() {
        let spec = crate::model::tests::two_item_spec();
        let params = crate::model::tests::table_params();
        let (data, _) = crate::sim::simulate_dataset(&crate::sim::SimConfig {
            n: 12,
            seed: 3,
            spec: spec.clone(),
            params: params.clone(),
            covariate_gen: None,
        })
        .unwrap();
        let grid = build_grid(&spec, &params, 4).unwrap();
        let fast = marginal_loglik(&data, &spec, &params, &grid).unwrap();
        let mut direct = 0.0;
        for i in 0..data.n() {
            direct += posterior_weights(&data, i, &spec, &params, &grid).unwrap().1;
        }
        assert_relative_eq!(fast, direct, epsilon = 1e-9);
    }
}
