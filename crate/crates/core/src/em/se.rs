//! Standard errors from the inverse of the negative numerical Hessian of the
//! marginal log-likelihood, computed by central differences on a transformed
//! free-parameter vector: the growth covariance through its Cholesky factor
//! and residual variances through logs, mapped back by the delta method.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, PanelDataset, ParameterSet};
use crate::quad::{build_grid, marginal_loglik, QuadratureGrid};

pub struct StandardErrors {
    /// Per free parameter in packed order; `None` when the Hessian was not
    /// negative-definite (boundary or non-identification).
    pub se: Option<DVector<f64>>,
    pub warnings: Vec<String>,
}

/// Packs parameters into the transformed coordinates used for
/// differentiation.
fn to_transformed(spec: &ModelSpec, params: &ParameterSet) -> Result<DVector<f64>> {
    let mut flat = params.pack(spec);
    let b = spec.growth_dim();
    let chol = params
        .psi_beta
        .clone()
        .cholesky()
        .ok_or_else(|| Error::not_pd("growth covariance", ""))?;
    let l = chol.l();
    let mut pos = b;
    for r in 0..b {
        for c in 0..=r {
            flat[pos] = l[(r, c)];
            pos += 1;
        }
    }
    // skip loadings, transform variances to logs
    pos = sigma2_offset(spec);
    for item in &spec.items {
        for k in 0..item.sigma2_len() {
            flat[pos + k] = flat[pos + k].ln();
        }
        pos += item.sigma2_len();
    }
    Ok(flat)
}

fn from_transformed(spec: &ModelSpec, theta: &DVector<f64>) -> Result<ParameterSet> {
    let b = spec.growth_dim();
    let mut flat = theta.clone();
    let mut l = DMatrix::zeros(b, b);
    let mut pos = b;
    for r in 0..b {
        for c in 0..=r {
            l[(r, c)] = theta[pos];
            pos += 1;
        }
    }
    let psi = &l * l.transpose();
    pos = b;
    for r in 0..b {
        for c in 0..=r {
            flat[pos] = psi[(r, c)];
            pos += 1;
        }
    }
    pos = sigma2_offset(spec);
    for item in &spec.items {
        for k in 0..item.sigma2_len() {
            flat[pos + k] = theta[pos + k].exp();
        }
        pos += item.sigma2_len();
    }
    ParameterSet::unpack(spec, &flat)
}

fn sigma2_offset(spec: &ModelSpec) -> usize {
    let b = spec.growth_dim();
    let mut pos = b + b * (b + 1) / 2;
    for j in 0..spec.n_items() {
        let rows = match spec.loading_scheme {
            crate::model::LoadingScheme::TimeInvariant => 1,
            crate::model::LoadingScheme::TimeVarying => spec.items[j].occasions,
        };
        pos += rows * spec.n_factors;
    }
    pos
}

/// Jacobian of the packed original parameters with respect to the
/// transformed ones, evaluated analytically.
fn delta_jacobian(spec: &ModelSpec, theta: &DVector<f64>) -> DMatrix<f64> {
    let k = theta.len();
    let b = spec.growth_dim();
    let mut jac = DMatrix::identity(k, k);
    // psi block: psi_ab = sum_k L_ak L_bk, d psi_ab / d L_ck =
    // delta_ac L_bk + delta_bc L_ak
    let tri = |r: usize, c: usize| -> usize {
        // position of lower-tri (r, c), c <= r, within the packed block
        r * (r + 1) / 2 + c
    };
    let mut l = DMatrix::zeros(b, b);
    for r in 0..b {
        for c in 0..=r {
            l[(r, c)] = theta[b + tri(r, c)];
        }
    }
    for r in 0..b {
        for c in 0..=r {
            let row = b + tri(r, c);
            for ck in 0..b {
                for kk in 0..=ck {
                    let col = b + tri(ck, kk);
                    let mut v = 0.0;
                    if r == ck && kk <= c {
                        v += l[(c, kk)];
                    }
                    if c == ck && kk <= r {
                        v += l[(r, kk)];
                    }
                    jac[(row, col)] = v;
                }
            }
        }
    }
    let mut pos = sigma2_offset(spec);
    for item in &spec.items {
        for kk in 0..item.sigma2_len() {
            jac[(pos + kk, pos + kk)] = theta[pos + kk].exp();
        }
        pos += item.sigma2_len();
    }
    jac
}

/// Numerical-Hessian standard errors at a (local) maximum. Evaluations
/// rebuild the quadrature grid at each perturbed point with the order of
/// `grid`, so the differentiated objective is the same approximate marginal
/// likelihood the estimator maximized.
pub fn standard_errors(
    data: &PanelDataset,
    spec: &ModelSpec,
    params: &ParameterSet,
    grid: &QuadratureGrid,
) -> Result<StandardErrors> {
    let m = grid.order;
    let theta0 = to_transformed(spec, params)?;
    let k = theta0.len();
    let mut warnings = Vec::new();

    let eval = |theta: &DVector<f64>| -> Result<f64> {
        let p = from_transformed(spec, theta)?;
        let g = build_grid(spec, &p, m)?;
        marginal_loglik(data, spec, &p, &g)
    };

    let h: Vec<f64> = (0..k)
        .map(|i| 5e-3 * theta0[i].abs().max(1.0))
        .collect();

    // enumerate every evaluation point, run them in parallel, assemble
    let mut points: Vec<DVector<f64>> = Vec::with_capacity(2 * k * k);
    for i in 0..k {
        let mut p = theta0.clone();
        p[i] += h[i];
        points.push(p);
        let mut p = theta0.clone();
        p[i] -= h[i];
        points.push(p);
    }
    for i in 0..k {
        for j in 0..i {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut p = theta0.clone();
                p[i] += si * h[i];
                p[j] += sj * h[j];
                points.push(p);
            }
        }
    }
    let f0 = eval(&theta0)?;
    let values: Vec<Result<f64>> = points.par_iter().map(&eval).collect();
    let mut vals = Vec::with_capacity(values.len());
    for v in values {
        match v {
            Ok(x) => vals.push(x),
            Err(e) => {
                warnings.push(format!(
                    "standard errors unavailable: likelihood evaluation failed near the \
                     maximum ({e})"
                ));
                return Ok(StandardErrors {
                    se: None,
                    warnings,
                });
            }
        }
    }

    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        let fp = vals[2 * i];
        let fm = vals[2 * i + 1];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
    }
    let mut pos = 2 * k;
    for i in 0..k {
        for j in 0..i {
            let (fpp, fpm, fmp, fmm) = (vals[pos], vals[pos + 1], vals[pos + 2], vals[pos + 3]);
            pos += 4;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }

    let neg = -hess;
    let eig = neg.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig <= 0.0 {
        warnings.push(format!(
            "observed information is not positive-definite (min eigenvalue {min_eig:.3e}); \
             a parameter may sit at an identification boundary"
        ));
        return Ok(StandardErrors {
            se: None,
            warnings,
        });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let cov_free = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    let jac = delta_jacobian(spec, &theta0);
    let cov = &jac * cov_free * jac.transpose();
    let se = DVector::from_fn(k, |i, _| cov[(i, i)].max(0.0).sqrt());
    Ok(StandardErrors {
        se: Some(se),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn transform_roundtrip() {
        let spec = crate::model::tests::two_item_spec();
        let params = crate::model::tests::table_params();
        let theta = to_transformed(&spec, &params).unwrap();
        let back = from_transformed(&spec, &theta).unwrap();
        let a = params.pack(&spec);
        let b = back.pack(&spec);
        for i in 0..a.len() {
            assert_relative_eq!(a[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn delta_jacobian_matches_finite_differences() {
        let spec = crate::model::tests::two_item_spec();
        let params = crate::model::tests::table_params();
        let theta = to_transformed(&spec, &params).unwrap();
        let jac = delta_jacobian(&spec, &theta);
        let h = 1e-6;
        for col in 0..theta.len() {
            let mut tp = theta.clone();
            tp[col] += h;
            let mut tm = theta.clone();
            tm[col] -= h;
            let fp = from_transformed(&spec, &tp).unwrap().pack(&spec);
            let fm = from_transformed(&spec, &tm).unwrap().pack(&spec);
            for row in 0..theta.len() {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                assert_relative_eq!(jac[(row, col)], fd, epsilon = 1e-5, max_relative = 1e-5);
            }
        }
    }
}
