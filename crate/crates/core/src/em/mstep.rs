//! M-step updates: closed-form solutions for the latent distribution and the
//! normal measurement parameters, Newton-Raphson for the binomial loadings.

use nalgebra::{DMatrix, DVector};

use crate::dist::{log1pexp, logistic};
use crate::error::{Error, Result};
use crate::model::{Family, ModelSpec, PanelDataset, ParameterSet, VarianceScheme};
use crate::quad::QuadratureGrid;

use super::estep::{e_step, CellLayout, EStepStats};
use super::scores::{growth_part, ItemFree};

/// Closed-form update of the latent mean and covariance from the accumulated
/// expected sufficient statistics sum_i E[eta_i] and sum_i E[eta_i eta_i'].
/// Growth means come from the posterior mean; factor means stay pinned at
/// zero. The covariance is the centered second moment projected onto the
/// block structure: cross-block zeroed, factor block reset to identity, the
/// growth block kept full.
pub fn m_step_latent(
    spec: &ModelSpec,
    n: usize,
    s1: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = spec.latent_dim();
    let b = spec.growth_dim();
    if s1.len() != d || s2.nrows() != d || s2.ncols() != d {
        return Err(Error::input("sufficient statistics have wrong dimensions"));
    }
    if n == 0 {
        return Err(Error::input("no individuals accumulated"));
    }
    let nf = n as f64;
    let sbar = s1 / nf;
    let mut mu_hat = DVector::zeros(d);
    mu_hat.rows_mut(0, b).copy_from(&sbar.rows(0, b));
    let psi_full =
        s2 / nf - &sbar * mu_hat.transpose() - &mu_hat * sbar.transpose() + &mu_hat * mu_hat.transpose();
    let mut psi_beta = psi_full.view((0, 0), (b, b)).into_owned();
    psi_beta = 0.5 * (&psi_beta + psi_beta.transpose());
    if psi_beta.clone().cholesky().is_none() {
        return Err(Error::not_pd(
            "updated growth covariance",
            "posterior spread collapsed; raise the quadrature order or check the data",
        ));
    }
    Ok((mu_hat.rows(0, b).into_owned(), psi_beta))
}

/// Which measurement parameters of one item an update solves for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ActiveParams {
    LoadingsAndCovariates,
    LoadingsOnly,
    CovariatesOnly,
}

pub(crate) struct ActiveSet {
    free: ItemFree,
    include_loadings: bool,
    include_gamma: bool,
}

impl ActiveSet {
    pub fn new(spec: &ModelSpec, item: usize, which: ActiveParams) -> Self {
        let free = ItemFree::new(spec, item);
        let (include_loadings, include_gamma) = match which {
            ActiveParams::LoadingsAndCovariates => (true, true),
            ActiveParams::LoadingsOnly => (true, false),
            ActiveParams::CovariatesOnly => (false, true),
        };
        ActiveSet {
            free,
            include_loadings,
            include_gamma,
        }
    }

    pub fn len(&self) -> usize {
        let mut p = 0;
        if self.include_loadings {
            p += self.free.n_loadings();
        }
        if self.include_gamma {
            p += self.free.occasions * self.free.n_cov;
        }
        p
    }

    fn loading_pos(&self, occasion: usize, k: usize) -> Option<usize> {
        self.include_loadings
            .then(|| self.free.loading_index(occasion, k))
    }

    fn gamma_pos(&self, occasion: usize, l: usize) -> Option<usize> {
        self.include_gamma.then(|| {
            let base = if self.include_loadings {
                self.free.n_loadings()
            } else {
                0
            };
            base + occasion * self.free.n_cov + l
        })
    }

    /// Current values of the active parameters.
    fn read(&self, params: &ParameterSet) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        for t in 0..self.free.occasions {
            for k in 0..self.free.q {
                if let Some(p) = self.loading_pos(t, k) {
                    out[p] = params.loadings[self.free.item]
                        [(if self.free.n_load_rows == 1 { 0 } else { t }, k)];
                }
            }
            for l in 0..self.free.n_cov {
                if let Some(p) = self.gamma_pos(t, l) {
                    out[p] = params.gamma[self.free.item][(t, l)];
                }
            }
        }
        out
    }

    pub(crate) fn write(&self, params: &mut ParameterSet, theta: &DVector<f64>) {
        for t in 0..self.free.occasions {
            for k in 0..self.free.q {
                if let Some(p) = self.loading_pos(t, k) {
                    let row = if self.free.n_load_rows == 1 { 0 } else { t };
                    params.loadings[self.free.item][(row, k)] = theta[p];
                }
            }
            for l in 0..self.free.n_cov {
                if let Some(p) = self.gamma_pos(t, l) {
                    params.gamma[self.free.item][(t, l)] = theta[p];
                }
            }
        }
    }

    fn item(&self) -> usize {
        self.free.item
    }
}

/// Growth parts of the item's predictor per (occasion, node), node-major per
/// occasion.
fn growth_table(spec: &ModelSpec, item: usize, grid: &QuadratureGrid) -> Vec<Vec<f64>> {
    (0..spec.items[item].occasions)
        .map(|t| {
            (0..grid.n_nodes())
                .map(|g| growth_part(spec, item, t, grid.node(g)))
                .collect()
        })
        .collect()
}

/// Predictor value at a node for the active parameterization: growth part
/// plus active loadings/covariates, plus the frozen complement.
fn predictor(
    active: &ActiveSet,
    params: &ParameterSet,
    spec: &ModelSpec,
    theta: &DVector<f64>,
    gtab: &[Vec<f64>],
    node: &[f64],
    t: usize,
    g: usize,
    x_row: Option<&[f64]>,
) -> f64 {
    let foff = spec.factor_offset();
    let mut v = gtab[t][g];
    for k in 0..active.free.q {
        let lam = match active.loading_pos(t, k) {
            Some(p) => theta[p],
            None => params.loading(spec, active.item(), t, k),
        };
        v += lam * node[foff + k];
    }
    if let Some(xs) = x_row {
        for (l, &x) in xs.iter().enumerate() {
            let gam = match active.gamma_pos(t, l) {
                Some(p) => theta[p],
                None => params.gamma[active.item()][(t, l)],
            };
            v += gam * x;
        }
    }
    v
}

/// Newton-Raphson solve of the expected score equations for a binomial
/// item's active measurement parameters, with a halving line search on the
/// expected complete-data objective. Uses collapsed per-node statistics when
/// the item carries no covariates, otherwise the full posterior weight
/// matrix.
pub(crate) fn newton_binomial(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    layout: &CellLayout,
    stats: &EStepStats,
    active: &ActiveSet,
    max_iter: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    let item = active.item();
    let it = &spec.items[item];
    let p_len = active.len();
    let mut theta = active.read(params);
    if p_len == 0 {
        return Ok(theta);
    }
    let gtab = growth_table(spec, item, grid);
    let n_nodes = grid.n_nodes();
    let foff = spec.factor_offset();
    let collapsed = it.covariates.is_empty();

    // assembles (Q, score, negative Hessian) at theta
    let assemble = |theta: &DVector<f64>, with_derivs: bool| -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut q_val = 0.0;
        let mut score = DVector::zeros(p_len);
        let mut neg_hess = DMatrix::zeros(p_len, p_len);
        let mut dvec = vec![0.0f64; p_len];
        if collapsed {
            for t in 0..it.occasions {
                let nt = it.trials[t] as f64;
                let sy_col = &stats.sy[layout.index(item, t) * n_nodes..];
                for g in 0..n_nodes {
                    let node = grid.node(g);
                    let v = predictor(active, params, spec, theta, &gtab, node, t, g, None);
                    let wp = stats.w_plus[g];
                    let sy = sy_col[g];
                    q_val += v * sy - nt * log1pexp(v) * wp;
                    if with_derivs {
                        let p = logistic(v);
                        let resid = sy - nt * p * wp;
                        let curv = nt * p * (1.0 - p) * wp;
                        // the collapsed path solves for loadings only
                        for k in 0..active.free.q {
                            let pi = active.loading_pos(t, k).expect("loadings active");
                            let zk = node[foff + k];
                            score[pi] += zk * resid;
                            for k2 in 0..active.free.q {
                                let pj = active.loading_pos(t, k2).expect("loadings active");
                                neg_hess[(pi, pj)] += zk * node[foff + k2] * curv;
                            }
                        }
                    }
                }
            }
        } else {
            let wtilde = stats
                .wtilde
                .as_ref()
                .expect("covariate update requires the posterior weight matrix");
            let mut idx = vec![0usize; p_len];
            for i in 0..data.n() {
                let wrow = &wtilde[i * n_nodes..(i + 1) * n_nodes];
                for t in 0..it.occasions {
                    let nt = it.trials[t] as f64;
                    let y = data.value(i, item, t);
                    let x_row = data.covariate_row(i, item, t);
                    for g in 0..n_nodes {
                        let w = wrow[g];
                        if w == 0.0 {
                            continue;
                        }
                        let node = grid.node(g);
                        let v = predictor(
                            active,
                            params,
                            spec,
                            theta,
                            &gtab,
                            node,
                            t,
                            g,
                            Some(&x_row),
                        );
                        q_val += w * (y * v - nt * log1pexp(v));
                        if with_derivs {
                            let p = logistic(v);
                            let resid = w * (y - nt * p);
                            let curv = w * nt * p * (1.0 - p);
                            let mut nz = 0usize;
                            for k in 0..active.free.q {
                                if let Some(pos) = active.loading_pos(t, k) {
                                    dvec[nz] = node[foff + k];
                                    idx[nz] = pos;
                                    nz += 1;
                                }
                            }
                            for (l, &x) in x_row.iter().enumerate() {
                                if let Some(pos) = active.gamma_pos(t, l) {
                                    dvec[nz] = x;
                                    idx[nz] = pos;
                                    nz += 1;
                                }
                            }
                            for a in 0..nz {
                                score[idx[a]] += dvec[a] * resid;
                                for b2 in 0..nz {
                                    neg_hess[(idx[a], idx[b2])] += dvec[a] * dvec[b2] * curv;
                                }
                            }
                        }
                    }
                }
            }
        }
        (q_val, score, neg_hess)
    };

    let mut last_grad_norm = f64::INFINITY;
    for _ in 0..max_iter {
        let (q0, score, neg_hess) = assemble(&theta, true);
        last_grad_norm = score.amax();
        let chol = neg_hess.clone().cholesky().ok_or_else(|| {
            Error::SingularDesign(format!(
                "item {}: expected information for the measurement parameters is singular \
                 (factor collapsed or covariates collinear)",
                it.name
            ))
        })?;
        let delta = chol.solve(&score);
        if delta.amax() < tol {
            return Ok(theta);
        }
        // halving line search on the expected objective
        let mut step = 1.0;
        loop {
            let cand = &theta + &delta * step;
            let (qc, _, _) = assemble(&cand, false);
            if qc >= q0 - 1e-12 * (1.0 + q0.abs()) {
                theta = cand;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                // ascent direction exhausted; treat as converged
                return Ok(theta);
            }
        }
        if (delta.amax() * step) < tol {
            return Ok(theta);
        }
    }
    Err(Error::NewtonDiverged {
        iterations: max_iter,
        grad_norm: last_grad_norm,
        last: theta.iter().copied().collect(),
    })
}

pub(crate) struct NormalUpdate {
    pub theta: DVector<f64>,
    pub sigma2: Vec<f64>,
    /// Per free variance parameter: true when the update hit the degeneracy
    /// floor.
    pub floored: Vec<bool>,
}

/// Closed-form update for a normal item's active measurement parameters and
/// residual variances: weighted least squares on the posterior moments, then
/// the expected squared residuals. `sigma2_floor` guards near-degenerate
/// cases.
pub(crate) fn normal_closed_form(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    layout: &CellLayout,
    stats: &EStepStats,
    active: &ActiveSet,
    sigma2_floor: f64,
) -> Result<NormalUpdate> {
    let item = active.item();
    let it = &spec.items[item];
    let p_len = active.len();
    let gtab = growth_table(spec, item, grid);
    let n_nodes = grid.n_nodes();
    let foff = spec.factor_offset();
    let nf = stats.n as f64;
    let collapsed = it.covariates.is_empty();

    let theta = if p_len == 0 {
        active.read(params)
    } else {
        let mut gram = DMatrix::zeros(p_len, p_len);
        let mut rhs = DVector::zeros(p_len);
        if collapsed {
            // the active set is loadings only; z-moments collapse per node
            for t in 0..it.occasions {
                let inv_s2 = 1.0 / params.sigma2_at(spec, item, t);
                let sy_col = &stats.sy[layout.index(item, t) * n_nodes..];
                for g in 0..n_nodes {
                    let node = grid.node(g);
                    let wp = stats.w_plus[g];
                    let target = sy_col[g] - gtab[t][g] * wp;
                    for k in 0..active.free.q {
                        let Some(pi) = active.loading_pos(t, k) else {
                            continue;
                        };
                        let zk = node[foff + k];
                        rhs[pi] += inv_s2 * zk * target;
                        for k2 in 0..active.free.q {
                            if let Some(pj) = active.loading_pos(t, k2) {
                                gram[(pi, pj)] += inv_s2 * zk * node[foff + k2] * wp;
                            }
                        }
                    }
                }
            }
        } else {
            let wtilde = stats
                .wtilde
                .as_ref()
                .expect("covariate update requires the posterior weight matrix");
            let mut dvec = vec![0.0f64; p_len];
            let mut idx = vec![0usize; p_len];
            for i in 0..data.n() {
                let wrow = &wtilde[i * n_nodes..(i + 1) * n_nodes];
                for t in 0..it.occasions {
                    let inv_s2 = 1.0 / params.sigma2_at(spec, item, t);
                    let y = data.value(i, item, t);
                    let x_row = data.covariate_row(i, item, t);
                    for g in 0..n_nodes {
                        let w = wrow[g];
                        if w == 0.0 {
                            continue;
                        }
                        let node = grid.node(g);
                        // target removes the growth part and the frozen
                        // complement of the predictor
                        let mut target = y - gtab[t][g];
                        let mut nz = 0usize;
                        for k in 0..active.free.q {
                            match active.loading_pos(t, k) {
                                Some(pos) => {
                                    dvec[nz] = node[foff + k];
                                    idx[nz] = pos;
                                    nz += 1;
                                }
                                None => {
                                    target -=
                                        params.loading(spec, item, t, k) * node[foff + k];
                                }
                            }
                        }
                        for (l, &x) in x_row.iter().enumerate() {
                            match active.gamma_pos(t, l) {
                                Some(pos) => {
                                    dvec[nz] = x;
                                    idx[nz] = pos;
                                    nz += 1;
                                }
                                None => {
                                    target -= params.gamma[item][(t, l)] * x;
                                }
                            }
                        }
                        let ws = w * inv_s2;
                        for a in 0..nz {
                            rhs[idx[a]] += ws * dvec[a] * target;
                            for b2 in 0..nz {
                                gram[(idx[a], idx[b2])] += ws * dvec[a] * dvec[b2];
                            }
                        }
                    }
                }
            }
        }
        let chol = gram.cholesky().ok_or_else(|| {
            Error::SingularDesign(format!(
                "item {}: normal-equation Gram matrix is singular (factor collapsed \
                 or covariates collinear)",
                it.name
            ))
        })?;
        chol.solve(&rhs)
    };

    // expected squared residuals at the updated parameters
    let mut per_occasion = vec![0.0; it.occasions];
    if collapsed {
        for t in 0..it.occasions {
            let sy_col = &stats.sy[layout.index(item, t) * n_nodes..];
            // sum_i y^2 is exact because posterior weights sum to one
            let y2: f64 = (0..data.n())
                .map(|i| data.value(i, item, t).powi(2))
                .sum();
            let mut cross = 0.0;
            let mut quad = 0.0;
            for g in 0..n_nodes {
                let node = grid.node(g);
                let v = predictor(active, params, spec, &theta, &gtab, node, t, g, None);
                cross += v * sy_col[g];
                quad += v * v * stats.w_plus[g];
            }
            per_occasion[t] = y2 - 2.0 * cross + quad;
        }
    } else {
        let wtilde = stats.wtilde.as_ref().unwrap();
        for i in 0..data.n() {
            let wrow = &wtilde[i * n_nodes..(i + 1) * n_nodes];
            for t in 0..it.occasions {
                let y = data.value(i, item, t);
                let x_row = data.covariate_row(i, item, t);
                for g in 0..n_nodes {
                    let w = wrow[g];
                    if w == 0.0 {
                        continue;
                    }
                    let node = grid.node(g);
                    let v = predictor(
                        active,
                        params,
                        spec,
                        &theta,
                        &gtab,
                        node,
                        t,
                        g,
                        Some(&x_row),
                    );
                    per_occasion[t] += w * (y - v) * (y - v);
                }
            }
        }
    }

    let raw: Vec<f64> = match it.variance_scheme {
        VarianceScheme::Heteroscedastic => per_occasion.iter().map(|s| s / nf).collect(),
        VarianceScheme::Homoscedastic => {
            vec![per_occasion.iter().sum::<f64>() / (nf * it.occasions as f64)]
        }
    };
    let mut sigma2 = Vec::with_capacity(raw.len());
    let mut floored = Vec::with_capacity(raw.len());
    for s in raw {
        if s < sigma2_floor {
            sigma2.push(sigma2_floor);
            floored.push(true);
        } else {
            sigma2.push(s);
            floored.push(false);
        }
    }
    Ok(NormalUpdate {
        theta,
        sigma2,
        floored,
    })
}

/// Rejects covariates that cannot be identified: any covariate constant
/// across individuals at some (item, occasion) duplicates the latent growth
/// intercept's role in the mean.
pub fn check_covariate_variation(data: &PanelDataset, spec: &ModelSpec) -> Result<()> {
    for (j, it) in spec.items.iter().enumerate() {
        for (l, name) in it.covariates.iter().enumerate() {
            let x = &data.items[j].covariates[l];
            for t in 0..it.occasions {
                let col = x.column(t);
                let first = col[0];
                if col.iter().all(|&v| v == first) {
                    return Err(Error::SingularDesign(format!(
                        "covariate {} on item {} is constant across individuals at \
                         occasion {}; its effect duplicates the latent intercept",
                        name,
                        it.name,
                        t + 1
                    )));
                }
            }
        }
    }
    Ok(())
}

fn stats_for(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
) -> Result<(CellLayout, EStepStats)> {
    let layout = CellLayout::new(spec);
    let stats = e_step(data, spec, params, grid, &layout)?;
    Ok((layout, stats))
}

/// One Newton-Raphson M-step for a binomial item: returns the updated
/// loadings (and covariate coefficients, which the step folds in when the
/// item has covariates). Defaults: 25 inner iterations, tolerance 1e-9.
pub fn m_step_binomial_loadings(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    item: usize,
) -> Result<ParameterSet> {
    if spec.items[item].family != Family::Binomial {
        return Err(Error::input(format!(
            "item {} is not binomial",
            spec.items[item].name
        )));
    }
    let (layout, stats) = stats_for(data, spec, params, grid)?;
    let active = ActiveSet::new(spec, item, ActiveParams::LoadingsAndCovariates);
    let theta = newton_binomial(data, spec, params, grid, &layout, &stats, &active, 25, 1e-9)?;
    let mut out = params.clone();
    active.write(&mut out, &theta);
    Ok(out)
}

/// One closed-form M-step for a normal item with covariate coefficients held
/// fixed: returns updated loadings and residual variances plus the
/// degeneracy flags.
pub fn m_step_normal(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
    item: usize,
) -> Result<(ParameterSet, Vec<bool>)> {
    if spec.items[item].family != Family::Normal {
        return Err(Error::input(format!(
            "item {} is not normal",
            spec.items[item].name
        )));
    }
    let (layout, stats) = stats_for(data, spec, params, grid)?;
    let active = ActiveSet::new(spec, item, ActiveParams::LoadingsOnly);
    let upd = normal_closed_form(data, spec, params, grid, &layout, &stats, &active, 0.0)?;
    let mut out = params.clone();
    active.write(&mut out, &upd.theta);
    out.sigma2[item] = upd.sigma2;
    Ok((out, upd.floored))
}

/// One M-step for the covariate coefficients of every item that has them,
/// loadings held fixed: weighted least squares for normal items, a dedicated
/// Newton-Raphson pass for binomial items. A no-op without covariates.
pub fn m_step_covariates(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
) -> Result<ParameterSet> {
    check_covariate_variation(data, spec)?;
    let mut out = params.clone();
    if !data.has_covariates() {
        return Ok(out);
    }
    let (layout, stats) = stats_for(data, spec, params, grid)?;
    for (j, it) in spec.items.iter().enumerate() {
        if it.covariates.is_empty() {
            continue;
        }
        let active = ActiveSet::new(spec, j, ActiveParams::CovariatesOnly);
        match it.family {
            Family::Binomial => {
                let theta =
                    newton_binomial(data, spec, params, grid, &layout, &stats, &active, 25, 1e-9)?;
                active.write(&mut out, &theta);
            }
            Family::Normal => {
                let upd =
                    normal_closed_form(data, spec, params, grid, &layout, &stats, &active, 0.0)?;
                active.write(&mut out, &upd.theta);
                // variances stay; this step only moves gamma
                out.sigma2[j] = params.sigma2[j].clone();
            }
        }
    }
    Ok(out)
}
