//! Moment-based starting values: occasion means regressed on the time
//! scores give the growth means, per-individual least-squares coefficients
//! give diagonal growth variances, loadings start at 0.5 on the anchor sign,
//! residual variances at half the residual spread, covariate effects at 0.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Family, ModelSpec, PanelDataset, ParameterSet};

use super::FitOptions;

/// Logit of the empirical proportion, clamped to [0.5/n_t, 1 - 0.5/n_t] so
/// that boundary occasions stay finite.
fn clamped_logit(y: f64, trials: f64) -> f64 {
    let lo = 0.5 / trials;
    let hi = 1.0 - lo;
    let p = (y / trials).clamp(lo, hi.max(lo));
    (p / (1.0 - p)).ln()
}

/// Least-squares polynomial fit of `values` on the time-score design;
/// returns the coefficient vector.
fn poly_fit(time_scores: &[f64], degree: usize, values: &DVector<f64>) -> Result<DVector<f64>> {
    let t = time_scores.len();
    let x = DMatrix::from_fn(t, degree + 1, |r, c| time_scores[r].powi(c as i32));
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * values;
    xtx.cholesky()
        .map(|c| c.solve(&xty))
        .ok_or_else(|| Error::SingularDesign("time-score design is singular".into()))
}

pub fn initialize(
    data: &PanelDataset,
    spec: &ModelSpec,
    _options: &FitOptions,
) -> Result<ParameterSet> {
    let n = data.n();
    if n < 2 {
        return Err(Error::input("initialization needs at least 2 individuals"));
    }
    let mut params = ParameterSet::neutral(spec);
    let nf = n as f64;

    for (j, item) in spec.items.iter().enumerate() {
        let t_j = item.occasions;
        // occasion-level working responses (logit-transformed proportions
        // for binomial items)
        let working = |i: usize, t: usize| -> f64 {
            let y = data.value(i, j, t);
            match item.family {
                Family::Binomial => clamped_logit(y, item.trials[t] as f64),
                Family::Normal => y,
            }
        };
        let occ_means = DVector::from_fn(t_j, |t, _| {
            (0..n).map(|i| working(i, t)).sum::<f64>() / nf
        });
        let mu_j = poly_fit(&item.time_scores, item.growth_degree, &occ_means)?;
        let off = spec.growth_offset(j);
        for r in 0..item.growth_dim() {
            params.mu_beta[off + r] = mu_j[r];
        }

        // between-individual spread of per-individual coefficients
        let mut coef_sums = vec![0.0; item.growth_dim()];
        let mut coef_sq = vec![0.0; item.growth_dim()];
        for i in 0..n {
            let yi = DVector::from_fn(t_j, |t, _| working(i, t));
            let bi = poly_fit(&item.time_scores, item.growth_degree, &yi)?;
            for r in 0..item.growth_dim() {
                coef_sums[r] += bi[r];
                coef_sq[r] += bi[r] * bi[r];
            }
        }
        for r in 0..item.growth_dim() {
            let mean = coef_sums[r] / nf;
            let var = (coef_sq[r] / nf - mean * mean).max(1e-3);
            params.psi_beta[(off + r, off + r)] = var;
        }
        // off-diagonal blocks stay zero: a diagonal start

        if item.family == Family::Normal {
            // residual spread around the fitted mean curve, halved
            let fitted = DVector::from_fn(t_j, |t, _| {
                let lam = item.time_scores[t];
                (0..item.growth_dim())
                    .map(|r| mu_j[r] * lam.powi(r as i32))
                    .sum::<f64>()
            });
            let mut per_t = vec![0.0; t_j];
            for i in 0..n {
                for t in 0..t_j {
                    let r = data.value(i, j, t) - fitted[t];
                    per_t[t] += r * r;
                }
            }
            let half_vars: Vec<f64> = per_t.iter().map(|s| (0.5 * s / nf).max(1e-3)).collect();
            params.sigma2[j] = match item.variance_scheme {
                crate::model::VarianceScheme::Heteroscedastic => half_vars,
                crate::model::VarianceScheme::Homoscedastic => {
                    vec![half_vars.iter().sum::<f64>() / t_j as f64]
                }
            };
        }
    }

    // loadings at 0.5 towards the positive anchor; gamma stays zero
    for l in params.loadings.iter_mut() {
        l.fill(0.5);
    }
    Ok(params)
}

/// Multiplicative and additive jitter on a packed parameter vector, used by
/// multi-start agreement checks. Keeps the growth covariance positive
/// definite by jittering its Cholesky factor.
pub fn jitter_params(params: &ParameterSet, scale: f64, seed: u64) -> Result<ParameterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |s: f64| 1.0 + s * (rng.gen::<f64>() * 2.0 - 1.0);
    let mut out = params.clone();
    for v in out.mu_beta.iter_mut() {
        *v = *v * draw(scale) + scale * (draw(scale) - 1.0);
    }
    let chol = out
        .psi_beta
        .clone()
        .cholesky()
        .ok_or_else(|| Error::not_pd("growth covariance", ""))?;
    let mut l = chol.l().clone_owned();
    for r in 0..l.nrows() {
        for c in 0..=r {
            l[(r, c)] *= draw(scale);
        }
    }
    out.psi_beta = &l * l.transpose();
    for m in out.loadings.iter_mut() {
        for v in m.iter_mut() {
            *v = *v * draw(scale) + 0.1 * (draw(scale) - 1.0);
        }
    }
    for s in out.sigma2.iter_mut() {
        for v in s.iter_mut() {
            *v *= draw(scale).abs().max(0.1);
        }
    }
    Ok(out)
}
