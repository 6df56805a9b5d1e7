//! Synthetic panel generation: the model read forward. Draw the latent
//! vector from its prior, form every cell's linear predictor, and draw the
//! observation from the cell's family.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::dist::logistic;
use crate::error::{Error, Result};
use crate::model::{
    design_row, validate, Family, ItemData, ModelSpec, PanelDataset, ParameterSet,
};

/// How covariate values are produced when a model declares covariates.
#[derive(Debug, Clone)]
pub enum CovariateGen {
    /// Independent standard normal draws per (individual, item, occasion,
    /// covariate).
    StandardNormal,
    /// A fixed design: per item, per covariate, an n x T_j matrix.
    Fixed(Vec<Vec<DMatrix<f64>>>),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    pub spec: ModelSpec,
    pub params: ParameterSet,
    /// Required when the spec declares covariates; defaults to standard
    /// normal draws if `None` and covariates exist.
    pub covariate_gen: Option<CovariateGen>,
}

/// Draws a complete panel, returning the data together with the latent
/// vectors that generated it (the latter are for validation only and are
/// never seen by the estimator). Fully reproducible from the seed.
///
/// Draw order per individual: d standard normals for the latent vector,
/// then per item in spec order, per occasion, any generated covariates
/// followed by the observation.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(PanelDataset, Vec<DVector<f64>>)> {
    if cfg.n < 1 {
        return Err(Error::input("simulation needs n >= 1"));
    }
    let spec = &cfg.spec;
    let params = &cfg.params;
    let violations = validate(spec, params);
    if !violations.is_empty() {
        return Err(Error::input(format!(
            "invalid parameters for simulation: {}",
            violations
                .iter()
                .map(|v| v.what.clone())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    let d = spec.latent_dim();
    let b = spec.growth_dim();
    let chol = params
        .psi_beta
        .clone()
        .cholesky()
        .ok_or_else(|| Error::not_pd("growth covariance block (psi_beta)", ""))?;
    let mut chol_l = DMatrix::zeros(d, d);
    chol_l.view_mut((0, 0), (b, b)).copy_from(&chol.l());
    for k in 0..spec.n_factors {
        chol_l[(b + k, b + k)] = 1.0;
    }
    let mu = params.mu_eta(spec);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut etas = Vec::with_capacity(cfg.n);
    let mut values: Vec<DMatrix<f64>> = spec
        .items
        .iter()
        .map(|it| DMatrix::zeros(cfg.n, it.occasions))
        .collect();
    let mut covariates: Vec<Vec<DMatrix<f64>>> = spec
        .items
        .iter()
        .map(|it| vec![DMatrix::zeros(cfg.n, it.occasions); it.covariates.len()])
        .collect();

    let fixed = match (&cfg.covariate_gen, spec.items.iter().any(|i| !i.covariates.is_empty())) {
        (Some(CovariateGen::Fixed(f)), _) => {
            for (j, it) in spec.items.iter().enumerate() {
                let per_item = f.get(j).ok_or_else(|| {
                    Error::input(format!("fixed covariate design missing item {}", it.name))
                })?;
                if per_item.len() != it.covariates.len() {
                    return Err(Error::input(format!(
                        "item {}: fixed design has {} covariates, expected {}",
                        it.name,
                        per_item.len(),
                        it.covariates.len()
                    )));
                }
                for x in per_item {
                    if x.nrows() != cfg.n || x.ncols() != it.occasions {
                        return Err(Error::input(format!(
                            "item {}: fixed covariate design must be {} x {}",
                            it.name, cfg.n, it.occasions
                        )));
                    }
                }
            }
            Some(f.clone())
        }
        _ => None,
    };

    for i in 0..cfg.n {
        let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = &mu + &chol_l * xi;
        for (j, it) in spec.items.iter().enumerate() {
            for t in 0..it.occasions {
                let mut x_row = Vec::with_capacity(it.covariates.len());
                for l in 0..it.covariates.len() {
                    let x = match &fixed {
                        Some(f) => f[j][l][(i, t)],
                        None => rng.sample::<f64, _>(StandardNormal),
                    };
                    covariates[j][l][(i, t)] = x;
                    x_row.push(x);
                }
                let w = design_row(spec, params, j, t)?;
                let mut v = w.dot(&eta);
                for (l, &x) in x_row.iter().enumerate() {
                    v += params.gamma[j][(t, l)] * x;
                }
                values[j][(i, t)] = match it.family {
                    Family::Binomial => {
                        let p = logistic(v).clamp(0.0, 1.0);
                        Binomial::new(it.trials[t] as u64, p)
                            .map_err(|e| Error::Numerical(format!("binomial draw: {e}")))?
                            .sample(&mut rng) as f64
                    }
                    Family::Normal => {
                        let sd = params.sigma2_at(spec, j, t).sqrt();
                        v + sd * rng.sample::<f64, _>(StandardNormal)
                    }
                };
            }
        }
        etas.push(eta);
    }

    let ids = (1..=cfg.n).map(|i| i.to_string()).collect();
    let items = values
        .into_iter()
        .zip(covariates)
        .map(|(values, covariates)| ItemData { values, covariates })
        .collect();
    let data = PanelDataset::new(spec, ids, items)?;
    Ok((data, etas))
}
