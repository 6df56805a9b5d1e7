//! Model specification, parameter sets, and the linear predictor.
//!
//! The latent vector stacks every item's growth coefficients in item order,
//! followed by the common factors:
//!
//! ```text
//! eta = (beta_01 .. beta_p1, ..., beta_0J .. beta_pJ, z_1 .. z_q)
//! ```
//!
//! This ordering is the single canonical layout shared by the latent mean,
//! the latent covariance, quadrature nodes, and design rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Binomial,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadingScheme {
    /// One loading per (item, factor); measurement invariance over time.
    TimeInvariant,
    /// One loading per (item, occasion, factor).
    TimeVarying,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceScheme {
    /// Occasion-specific residual variances for a normal item.
    Heteroscedastic,
    /// A single residual variance shared across occasions.
    Homoscedastic,
}

#[derive(Debug, Clone)]
pub struct ItemSpec {
    pub name: String,
    pub family: Family,
    /// Number of occasions T_j.
    pub occasions: usize,
    /// Trial counts per occasion; binomial items only (empty for normal).
    pub trials: Vec<u32>,
    /// Growth polynomial degree p_j (0 = random intercept only).
    pub growth_degree: usize,
    /// Time scores lambda_t; defaults to 0, 1, ..., T_j - 1.
    pub time_scores: Vec<f64>,
    /// Residual-variance scheme; meaningful for normal items only.
    pub variance_scheme: VarianceScheme,
    /// Names of covariates entering this item's predictor (one free
    /// coefficient per occasion per covariate).
    pub covariates: Vec<String>,
}

impl ItemSpec {
    pub fn binomial(name: &str, trials: Vec<u32>, growth_degree: usize) -> Self {
        let occasions = trials.len();
        ItemSpec {
            name: name.to_string(),
            family: Family::Binomial,
            occasions,
            trials,
            growth_degree,
            time_scores: default_time_scores(occasions),
            variance_scheme: VarianceScheme::Heteroscedastic,
            covariates: Vec::new(),
        }
    }

    pub fn normal(name: &str, occasions: usize, growth_degree: usize) -> Self {
        ItemSpec {
            name: name.to_string(),
            family: Family::Normal,
            occasions,
            trials: Vec::new(),
            growth_degree,
            time_scores: default_time_scores(occasions),
            variance_scheme: VarianceScheme::Heteroscedastic,
            covariates: Vec::new(),
        }
    }

    pub fn with_time_scores(mut self, scores: Vec<f64>) -> Self {
        self.time_scores = scores;
        self
    }

    pub fn homoscedastic(mut self) -> Self {
        self.variance_scheme = VarianceScheme::Homoscedastic;
        self
    }

    pub fn with_covariates(mut self, names: Vec<String>) -> Self {
        self.covariates = names;
        self
    }

    /// Number of growth coefficients p_j + 1.
    pub fn growth_dim(&self) -> usize {
        self.growth_degree + 1
    }

    /// Number of free residual-variance parameters (0 for binomial items).
    pub fn sigma2_len(&self) -> usize {
        match self.family {
            Family::Binomial => 0,
            Family::Normal => match self.variance_scheme {
                VarianceScheme::Heteroscedastic => self.occasions,
                VarianceScheme::Homoscedastic => 1,
            },
        }
    }
}

fn default_time_scores(occasions: usize) -> Vec<f64> {
    (0..occasions).map(|t| t as f64).collect()
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub items: Vec<ItemSpec>,
    /// Number of common factors q.
    pub n_factors: usize,
    pub loading_scheme: LoadingScheme,
    /// Item index whose loading anchors the sign of each factor.
    pub anchors: Vec<usize>,
}

impl ModelSpec {
    /// Builds and validates a specification. Anchors default to the first
    /// item for every factor.
    pub fn new(items: Vec<ItemSpec>, n_factors: usize, scheme: LoadingScheme) -> Result<Self> {
        let anchors = vec![0usize; n_factors];
        ModelSpec::with_anchors(items, n_factors, scheme, anchors)
    }

    pub fn with_anchors(
        items: Vec<ItemSpec>,
        n_factors: usize,
        loading_scheme: LoadingScheme,
        anchors: Vec<usize>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::input("model must contain at least one item"));
        }
        for item in &items {
            if item.occasions == 0 {
                return Err(Error::input(format!(
                    "item {}: needs at least one occasion",
                    item.name
                )));
            }
            if item.family == Family::Binomial {
                if item.trials.len() != item.occasions {
                    return Err(Error::input(format!(
                        "item {}: expected {} trial counts, got {}",
                        item.name,
                        item.occasions,
                        item.trials.len()
                    )));
                }
                if item.trials.iter().any(|&n| n < 1) {
                    return Err(Error::input(format!(
                        "item {}: every occasion needs trials >= 1",
                        item.name
                    )));
                }
            }
            if item.occasions < item.growth_dim() {
                return Err(Error::input(format!(
                    "item {}: growth degree {} needs at least {} occasions, got {}",
                    item.name,
                    item.growth_degree,
                    item.growth_dim(),
                    item.occasions
                )));
            }
            if item.time_scores.len() != item.occasions {
                return Err(Error::input(format!(
                    "item {}: expected {} time scores, got {}",
                    item.name,
                    item.occasions,
                    item.time_scores.len()
                )));
            }
            if item.time_scores.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::input(format!(
                    "item {}: time scores must be strictly increasing",
                    item.name
                )));
            }
        }
        let mut names: Vec<&str> = items.iter().map(|i| i.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != items.len() {
            return Err(Error::input("item names must be unique"));
        }
        if anchors.len() != n_factors {
            return Err(Error::input(format!(
                "expected {} anchors, got {}",
                n_factors,
                anchors.len()
            )));
        }
        if anchors.iter().any(|&a| a >= items.len()) {
            return Err(Error::input("anchor item index out of range"));
        }
        Ok(ModelSpec {
            items,
            n_factors,
            loading_scheme,
            anchors,
        })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// Total growth dimension b = sum of p_j + 1 over items.
    pub fn growth_dim(&self) -> usize {
        self.items.iter().map(|i| i.growth_dim()).sum()
    }

    /// Latent dimension d = b + q.
    pub fn latent_dim(&self) -> usize {
        self.growth_dim() + self.n_factors
    }

    /// Offset of item j's growth block within the latent vector.
    pub fn growth_offset(&self, item: usize) -> usize {
        self.items[..item].iter().map(|i| i.growth_dim()).sum()
    }

    /// Offset of the factor block within the latent vector.
    pub fn factor_offset(&self) -> usize {
        self.growth_dim()
    }

    pub fn item_index(&self, name: &str) -> Option<usize> {
        self.items.iter().position(|i| i.name == name)
    }

    fn check_item_occasion(&self, item: usize, occasion: usize) -> Result<()> {
        let it = self
            .items
            .get(item)
            .ok_or_else(|| Error::input(format!("unknown item index {item}")))?;
        if occasion >= it.occasions {
            return Err(Error::input(format!(
                "item {}: occasion {} out of range (T = {})",
                it.name, occasion, it.occasions
            )));
        }
        Ok(())
    }

    /// Number of loading rows stored per item under the current scheme.
    fn loading_rows(&self, item: usize) -> usize {
        match self.loading_scheme {
            LoadingScheme::TimeInvariant => 1,
            LoadingScheme::TimeVarying => self.items[item].occasions,
        }
    }

    /// Count of free parameters (growth means, unique Psi_beta entries,
    /// loadings, residual variances, covariate coefficients).
    pub fn n_free_parameters(&self) -> usize {
        let b = self.growth_dim();
        let mut k = b + b * (b + 1) / 2;
        for j in 0..self.n_items() {
            k += self.loading_rows(j) * self.n_factors;
            k += self.items[j].sigma2_len();
            k += self.items[j].occasions * self.items[j].covariates.len();
        }
        k
    }
}

/// All free parameters of the model. The factor covariance is pinned to the
/// identity and the factor means to zero; neither is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    /// Growth-coefficient means, length b.
    pub mu_beta: DVector<f64>,
    /// Growth-coefficient covariance, b x b symmetric positive-definite.
    pub psi_beta: DMatrix<f64>,
    /// Per item: loadings as a (1 or T_j) x q matrix depending on scheme.
    pub loadings: Vec<DMatrix<f64>>,
    /// Per item: residual variances (empty for binomial items; length 1
    /// under the homoscedastic scheme, T_j otherwise).
    pub sigma2: Vec<Vec<f64>>,
    /// Per item: covariate coefficients, T_j x L_j.
    pub gamma: Vec<DMatrix<f64>>,
}

impl ParameterSet {
    /// A structurally conformant parameter set: zero means, identity growth
    /// covariance, loadings 0.5, unit residual variances, zero covariate
    /// coefficients. A convenient starting point for tests and defaults.
    pub fn neutral(spec: &ModelSpec) -> Self {
        let b = spec.growth_dim();
        let loadings = (0..spec.n_items())
            .map(|j| DMatrix::from_element(spec.loading_rows(j), spec.n_factors, 0.5))
            .collect();
        let sigma2 = spec
            .items
            .iter()
            .map(|it| vec![1.0; it.sigma2_len()])
            .collect();
        let gamma = spec
            .items
            .iter()
            .map(|it| DMatrix::zeros(it.occasions, it.covariates.len()))
            .collect();
        ParameterSet {
            mu_beta: DVector::zeros(b),
            psi_beta: DMatrix::identity(b, b),
            loadings,
            sigma2,
            gamma,
        }
    }

    /// The full latent mean (growth means followed by structural zeros for
    /// the factor block).
    pub fn mu_eta(&self, spec: &ModelSpec) -> DVector<f64> {
        let d = spec.latent_dim();
        let mut mu = DVector::zeros(d);
        mu.rows_mut(0, spec.growth_dim()).copy_from(&self.mu_beta);
        mu
    }

    /// The full latent covariance: block-diagonal Psi_beta and I_q.
    pub fn psi(&self, spec: &ModelSpec) -> DMatrix<f64> {
        let d = spec.latent_dim();
        let b = spec.growth_dim();
        let mut psi = DMatrix::zeros(d, d);
        psi.view_mut((0, 0), (b, b)).copy_from(&self.psi_beta);
        for k in 0..spec.n_factors {
            psi[(b + k, b + k)] = 1.0;
        }
        psi
    }

    /// Loading of factor `k` on `item` at `occasion` under the spec's scheme.
    pub fn loading(&self, spec: &ModelSpec, item: usize, occasion: usize, k: usize) -> f64 {
        match spec.loading_scheme {
            LoadingScheme::TimeInvariant => self.loadings[item][(0, k)],
            LoadingScheme::TimeVarying => self.loadings[item][(occasion, k)],
        }
    }

    /// Residual variance of a normal item at an occasion.
    pub fn sigma2_at(&self, spec: &ModelSpec, item: usize, occasion: usize) -> f64 {
        match spec.items[item].variance_scheme {
            VarianceScheme::Heteroscedastic => self.sigma2[item][occasion],
            VarianceScheme::Homoscedastic => self.sigma2[item][0],
        }
    }

    /// Packs every free parameter into a flat vector in the canonical order:
    /// growth means, lower triangle of Psi_beta (row-major), loadings per
    /// item (row-major), residual variances per item, covariate coefficients
    /// per item (row-major).
    pub fn pack(&self, spec: &ModelSpec) -> DVector<f64> {
        let mut out = Vec::with_capacity(spec.n_free_parameters());
        out.extend(self.mu_beta.iter().copied());
        let b = spec.growth_dim();
        for r in 0..b {
            for c in 0..=r {
                out.push(self.psi_beta[(r, c)]);
            }
        }
        for j in 0..spec.n_items() {
            let l = &self.loadings[j];
            for r in 0..l.nrows() {
                for c in 0..l.ncols() {
                    out.push(l[(r, c)]);
                }
            }
        }
        for s in &self.sigma2 {
            out.extend(s.iter().copied());
        }
        for g in &self.gamma {
            for r in 0..g.nrows() {
                for c in 0..g.ncols() {
                    out.push(g[(r, c)]);
                }
            }
        }
        DVector::from_vec(out)
    }

    /// Inverse of [`ParameterSet::pack`].
    pub fn unpack(spec: &ModelSpec, flat: &DVector<f64>) -> Result<Self> {
        if flat.len() != spec.n_free_parameters() {
            return Err(Error::input(format!(
                "expected {} packed parameters, got {}",
                spec.n_free_parameters(),
                flat.len()
            )));
        }
        let mut pos = 0usize;
        let mut take = |k: usize| {
            let s = flat.rows(pos, k).iter().copied().collect::<Vec<_>>();
            pos += k;
            s
        };
        let b = spec.growth_dim();
        let mu_beta = DVector::from_vec(take(b));
        let mut psi_beta = DMatrix::zeros(b, b);
        for r in 0..b {
            let row = take(r + 1);
            for (c, v) in row.into_iter().enumerate() {
                psi_beta[(r, c)] = v;
                psi_beta[(c, r)] = v;
            }
        }
        let mut loadings = Vec::with_capacity(spec.n_items());
        for j in 0..spec.n_items() {
            let rows = spec.loading_rows(j);
            let vals = take(rows * spec.n_factors);
            loadings.push(DMatrix::from_row_slice(rows, spec.n_factors, &vals));
        }
        let mut sigma2 = Vec::with_capacity(spec.n_items());
        for it in &spec.items {
            sigma2.push(take(it.sigma2_len()));
        }
        let mut gamma = Vec::with_capacity(spec.n_items());
        for it in &spec.items {
            let vals = take(it.occasions * it.covariates.len());
            gamma.push(DMatrix::from_row_slice(
                it.occasions,
                it.covariates.len(),
                &vals,
            ));
        }
        Ok(ParameterSet {
            mu_beta,
            psi_beta,
            loadings,
            sigma2,
            gamma,
        })
    }
}

/// Design row w_tj: zeros except the item's own growth block, which carries
/// powers of the time score, and the factor block, which carries the item's
/// loadings at that occasion.
pub fn design_row(
    spec: &ModelSpec,
    params: &ParameterSet,
    item: usize,
    occasion: usize,
) -> Result<DVector<f64>> {
    spec.check_item_occasion(item, occasion)?;
    let mut w = DVector::zeros(spec.latent_dim());
    let it = &spec.items[item];
    let off = spec.growth_offset(item);
    let lam_t = it.time_scores[occasion];
    let mut pow = 1.0;
    for r in 0..it.growth_dim() {
        w[off + r] = pow;
        pow *= lam_t;
    }
    let foff = spec.factor_offset();
    for k in 0..spec.n_factors {
        w[foff + k] = params.loading(spec, item, occasion, k);
    }
    Ok(w)
}

/// Linear predictor v_tj = w_tj . eta + gamma_tj . x_tj.
pub fn linear_predictor(
    spec: &ModelSpec,
    params: &ParameterSet,
    eta: &DVector<f64>,
    item: usize,
    occasion: usize,
    covariates: &[f64],
) -> Result<f64> {
    spec.check_item_occasion(item, occasion)?;
    if eta.len() != spec.latent_dim() {
        return Err(Error::input(format!(
            "latent vector length {} does not match latent dimension {}",
            eta.len(),
            spec.latent_dim()
        )));
    }
    let n_cov = spec.items[item].covariates.len();
    if covariates.len() != n_cov {
        return Err(Error::input(format!(
            "item {}: expected {} covariate values, got {}",
            spec.items[item].name,
            n_cov,
            covariates.len()
        )));
    }
    let w = design_row(spec, params, item, occasion)?;
    let mut v = w.dot(eta);
    for (l, &x) in covariates.iter().enumerate() {
        v += params.gamma[item][(occasion, l)] * x;
    }
    Ok(v)
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub what: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.what)
    }
}

/// Checks every structural invariant of a parameter set against its spec.
/// Violations are returned as data; an empty list means the set is valid.
pub fn validate(spec: &ModelSpec, params: &ParameterSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |what: String| out.push(Violation { what });
    let b = spec.growth_dim();
    if params.mu_beta.len() != b {
        push(format!(
            "growth mean has length {}, expected {}",
            params.mu_beta.len(),
            b
        ));
    }
    if params.psi_beta.nrows() != b || params.psi_beta.ncols() != b {
        push(format!(
            "growth covariance is {}x{}, expected {}x{}",
            params.psi_beta.nrows(),
            params.psi_beta.ncols(),
            b,
            b
        ));
    } else {
        let asym = (&params.psi_beta - params.psi_beta.transpose()).abs().max();
        if asym > 1e-10 {
            push(format!("growth covariance not symmetric (max |A - A'| = {asym:.3e})"));
        } else if b > 0 {
            let eig = params.psi_beta.clone().symmetric_eigen();
            let min = eig.eigenvalues.min();
            if min <= 0.0 {
                push(format!(
                    "growth covariance not positive-definite (min eigenvalue {min:.3e})"
                ));
            }
        }
    }
    if params.loadings.len() != spec.n_items() {
        push(format!(
            "expected loadings for {} items, got {}",
            spec.n_items(),
            params.loadings.len()
        ));
    } else {
        for j in 0..spec.n_items() {
            let l = &params.loadings[j];
            let rows = spec.loading_rows(j);
            if l.nrows() != rows || l.ncols() != spec.n_factors {
                push(format!(
                    "item {}: loadings are {}x{}, expected {}x{}",
                    spec.items[j].name,
                    l.nrows(),
                    l.ncols(),
                    rows,
                    spec.n_factors
                ));
            }
        }
        for (k, &anchor) in spec.anchors.iter().enumerate() {
            if params.loadings[anchor].ncols() == spec.n_factors
                && params.loadings[anchor].nrows() > 0
            {
                let v = params.loadings[anchor][(0, k)];
                if v <= 0.0 {
                    push(format!(
                        "factor {}: anchor loading on item {} must be positive, got {v}",
                        k + 1,
                        spec.items[anchor].name
                    ));
                }
            }
        }
    }
    if params.sigma2.len() != spec.n_items() {
        push(format!(
            "expected residual variances for {} items, got {}",
            spec.n_items(),
            params.sigma2.len()
        ));
    } else {
        for (j, it) in spec.items.iter().enumerate() {
            if params.sigma2[j].len() != it.sigma2_len() {
                push(format!(
                    "item {}: expected {} residual variances, got {}",
                    it.name,
                    it.sigma2_len(),
                    params.sigma2[j].len()
                ));
                continue;
            }
            for (t, &s) in params.sigma2[j].iter().enumerate() {
                if s <= 0.0 {
                    push(format!(
                        "item {}: nonpositive residual variance {s} at position {t}",
                        it.name
                    ));
                }
            }
        }
    }
    if params.gamma.len() != spec.n_items() {
        push(format!(
            "expected covariate coefficients for {} items, got {}",
            spec.n_items(),
            params.gamma.len()
        ));
    } else {
        for (j, it) in spec.items.iter().enumerate() {
            let g = &params.gamma[j];
            if g.nrows() != it.occasions || g.ncols() != it.covariates.len() {
                push(format!(
                    "item {}: covariate coefficients are {}x{}, expected {}x{}",
                    it.name,
                    g.nrows(),
                    g.ncols(),
                    it.occasions,
                    it.covariates.len()
                ));
            }
        }
    }
    out
}

/// Observations for one item: an n x T_j value matrix plus one n x T_j
/// matrix per covariate used by the item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemData {
    pub values: DMatrix<f64>,
    pub covariates: Vec<DMatrix<f64>>,
}

/// A complete rectangular panel: n individuals observed on every item at
/// every occasion.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub ids: Vec<String>,
    pub items: Vec<ItemData>,
}

impl PanelDataset {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Assembles a dataset from per-item matrices, checking shapes and
    /// binomial bounds against the spec.
    pub fn new(spec: &ModelSpec, ids: Vec<String>, items: Vec<ItemData>) -> Result<Self> {
        if items.len() != spec.n_items() {
            return Err(Error::input(format!(
                "expected data for {} items, got {}",
                spec.n_items(),
                items.len()
            )));
        }
        let n = ids.len();
        for (j, it) in spec.items.iter().enumerate() {
            let d = &items[j];
            if d.values.nrows() != n || d.values.ncols() != it.occasions {
                return Err(Error::input(format!(
                    "item {}: values are {}x{}, expected {}x{}",
                    it.name,
                    d.values.nrows(),
                    d.values.ncols(),
                    n,
                    it.occasions
                )));
            }
            if d.covariates.len() != it.covariates.len() {
                return Err(Error::input(format!(
                    "item {}: expected {} covariate matrices, got {}",
                    it.name,
                    it.covariates.len(),
                    d.covariates.len()
                )));
            }
            for (l, x) in d.covariates.iter().enumerate() {
                if x.nrows() != n || x.ncols() != it.occasions {
                    return Err(Error::input(format!(
                        "item {}: covariate {} is {}x{}, expected {}x{}",
                        it.name,
                        it.covariates[l],
                        x.nrows(),
                        x.ncols(),
                        n,
                        it.occasions
                    )));
                }
            }
            if it.family == Family::Binomial {
                for i in 0..n {
                    for t in 0..it.occasions {
                        let y = d.values[(i, t)];
                        let nt = it.trials[t] as f64;
                        if y.fract() != 0.0 || y < 0.0 || y > nt {
                            return Err(Error::input(format!(
                                "item {}, individual {}, occasion {}: value {} outside [0, {}]",
                                it.name,
                                ids[i],
                                t + 1,
                                y,
                                nt
                            )));
                        }
                    }
                }
            }
        }
        Ok(PanelDataset { ids, items })
    }

    pub fn value(&self, i: usize, item: usize, occasion: usize) -> f64 {
        self.items[item].values[(i, occasion)]
    }

    /// Covariate values for one cell, in the item's covariate order.
    pub fn covariate_row(&self, i: usize, item: usize, occasion: usize) -> Vec<f64> {
        self.items[item]
            .covariates
            .iter()
            .map(|x| x[(i, occasion)])
            .collect()
    }

    pub fn has_covariates(&self) -> bool {
        self.items.iter().any(|d| !d.covariates.is_empty())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Two-item specification mirroring the reference application: one
    /// binomial count item and one heteroscedastic normal item, linear
    /// growth, one common factor with invariant loadings.
    pub(crate) fn two_item_spec() -> ModelSpec {
        ModelSpec::new(
            vec![
                ItemSpec::binomial("NE", vec![8, 12, 14], 1),
                ItemSpec::normal("AM", 3, 1),
            ],
            1,
            LoadingScheme::TimeInvariant,
        )
        .unwrap()
    }

    /// The published estimates for the two-item model.
    pub(crate) fn table_params() -> ParameterSet {
        let psi = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.231, -0.107, 1.004, -0.363, //
                -0.107, 0.093, -0.531, 0.413, //
                1.004, -0.531, 4.980, -2.183, //
                -0.363, 0.413, -2.183, 2.164,
            ],
        );
        ParameterSet {
            mu_beta: DVector::from_vec(vec![0.249, -0.443, 23.98, -0.113]),
            psi_beta: psi,
            loadings: vec![
                DMatrix::from_row_slice(1, 1, &[0.524]),
                DMatrix::from_row_slice(1, 1, &[2.581]),
            ],
            sigma2: vec![vec![], vec![10.080, 9.953, 14.568]],
            gamma: vec![DMatrix::zeros(3, 0), DMatrix::zeros(3, 0)],
        }
    }

    #[test]
    fn latent_layout_dimensions() {
        let spec = two_item_spec();
        assert_eq!(spec.growth_dim(), 4);
        assert_eq!(spec.latent_dim(), 5);
        assert_eq!(spec.growth_offset(0), 0);
        assert_eq!(spec.growth_offset(1), 2);
        assert_eq!(spec.factor_offset(), 4);
        assert_eq!(spec.n_free_parameters(), 19);
    }

    #[test]
    fn design_row_binomial_first_occasion() {
        let spec = two_item_spec();
        let p = table_params();
        let w = design_row(&spec, &p, 0, 0).unwrap();
        assert_eq!(
            w.as_slice(),
            &[1.0, 0.0, 0.0, 0.0, 0.524],
            "growth block (1, 0), other block zero, factor entry = loading"
        );
    }

    #[test]
    fn design_row_normal_third_occasion() {
        let spec = two_item_spec();
        let p = table_params();
        let w = design_row(&spec, &p, 1, 2).unwrap();
        assert_eq!(w.as_slice(), &[0.0, 0.0, 1.0, 2.0, 2.581]);
    }

    #[test]
    fn design_row_intercept_only() {
        let spec = ModelSpec::new(
            vec![ItemSpec::normal("y", 1, 0)],
            0,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let p = ParameterSet::neutral(&spec);
        let w = design_row(&spec, &p, 0, 0).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
    }

    #[test]
    fn design_row_rejects_unknown_cell() {
        let spec = two_item_spec();
        let p = table_params();
        assert!(design_row(&spec, &p, 5, 0).is_err());
        assert!(design_row(&spec, &p, 0, 3).is_err());
    }

    #[test]
    fn predictor_at_latent_mean_is_growth_intercept() {
        let spec = two_item_spec();
        let p = table_params();
        let eta = p.mu_eta(&spec);
        let v = linear_predictor(&spec, &p, &eta, 0, 0, &[]).unwrap();
        assert_relative_eq!(v, 0.249, max_relative = 1e-12);
    }

    #[test]
    fn predictor_zero_at_zero_latent() {
        let spec = two_item_spec();
        let p = table_params();
        let eta = DVector::zeros(5);
        assert_eq!(linear_predictor(&spec, &p, &eta, 1, 1, &[]).unwrap(), 0.0);
    }

    #[test]
    fn predictor_matches_explicit_summation() {
        let spec = ModelSpec::new(
            vec![
                ItemSpec::binomial("c", vec![5, 5, 5, 5], 2)
                    .with_covariates(vec!["x1".into(), "x2".into()]),
                ItemSpec::normal("g", 3, 1),
            ],
            2,
            LoadingScheme::TimeVarying,
        )
        .unwrap();
        let mut p = ParameterSet::neutral(&spec);
        p.gamma[0] = DMatrix::from_fn(4, 2, |r, c| 0.3 * (r as f64 + 1.0) - 0.2 * c as f64);
        for (i, l) in p.loadings.iter_mut().enumerate() {
            *l = DMatrix::from_fn(l.nrows(), l.ncols(), |r, c| {
                0.1 * (r as f64 + 1.0) + 0.05 * (c as f64 + 1.0) + i as f64 * 0.01
            });
        }
        let eta = DVector::from_vec(vec![0.4, -0.2, 0.1, 1.5, -0.7, 0.3, 0.9]);
        let x = [0.8, -1.1];
        let item = 0;
        let t = 2;
        let v = linear_predictor(&spec, &p, &eta, item, t, &x).unwrap();
        // term-by-term: growth powers, factor loadings, covariates
        let lam_t = spec.items[item].time_scores[t];
        let mut expect = 0.0;
        for r in 0..spec.items[item].growth_dim() {
            expect += eta[spec.growth_offset(item) + r] * lam_t.powi(r as i32);
        }
        for k in 0..spec.n_factors {
            expect += p.loading(&spec, item, t, k) * eta[spec.factor_offset() + k];
        }
        for (l, &xv) in x.iter().enumerate() {
            expect += p.gamma[item][(t, l)] * xv;
        }
        assert_relative_eq!(v, expect, max_relative = 1e-14);
    }

    #[test]
    fn predictor_linear_in_latent() {
        let spec = two_item_spec();
        let p = table_params();
        let e1 = DVector::from_vec(vec![0.3, -0.1, 1.2, 0.4, -0.9]);
        let e2 = DVector::from_vec(vec![-0.5, 0.8, 0.0, -1.3, 0.2]);
        let a = 2.75;
        for item in 0..2 {
            for t in 0..3 {
                let lhs =
                    linear_predictor(&spec, &p, &(&e1 * a + &e2), item, t, &[]).unwrap();
                let rhs = a * linear_predictor(&spec, &p, &e1, item, t, &[]).unwrap()
                    + linear_predictor(&spec, &p, &e2, item, t, &[]).unwrap();
                assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn validate_accepts_published_estimates() {
        let spec = two_item_spec();
        assert!(validate(&spec, &table_params()).is_empty());
    }

    #[test]
    fn validate_flags_non_pd_covariance() {
        let spec = two_item_spec();
        let mut p = table_params();
        p.psi_beta[(1, 1)] = -0.05;
        let v = validate(&spec, &p);
        assert!(v.iter().any(|v| v.what.contains("positive-definite")));
    }

    #[test]
    fn validate_flags_nonpositive_variance() {
        let spec = two_item_spec();
        let mut p = table_params();
        p.sigma2[1][0] = 0.0;
        let v = validate(&spec, &p);
        assert!(v.iter().any(|v| v.what.contains("nonpositive residual variance")));
    }

    #[test]
    fn validate_flags_anchor_sign() {
        let spec = two_item_spec();
        let mut p = table_params();
        p.loadings[0][(0, 0)] = -0.5;
        let v = validate(&spec, &p);
        assert!(v.iter().any(|v| v.what.contains("anchor")));
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let spec = ModelSpec::new(
            vec![
                ItemSpec::binomial("c", vec![5, 5, 5], 1).with_covariates(vec!["x".into()]),
                ItemSpec::normal("g", 4, 2).homoscedastic(),
            ],
            2,
            LoadingScheme::TimeVarying,
        )
        .unwrap();
        let mut p = ParameterSet::neutral(&spec);
        p.mu_beta = DVector::from_vec(vec![0.1, -0.2, 3.0, 0.4, 0.5]);
        p.psi_beta = {
            let a = DMatrix::from_fn(5, 5, |r, c| 0.3 * ((r * 5 + c) as f64).sin());
            &a * a.transpose() + DMatrix::identity(5, 5)
        };
        p.gamma[0] = DMatrix::from_fn(3, 1, |r, _| r as f64 * 0.7 - 1.0);
        let flat = p.pack(&spec);
        assert_eq!(flat.len(), spec.n_free_parameters());
        let back = ParameterSet::unpack(&spec, &flat).unwrap();
        assert_eq!(p, back);
    }
}
