//! Conditional log-densities of the observations given the latent variables,
//! and the latent log-prior.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{linear_predictor, Family, ModelSpec, PanelDataset, ParameterSet};

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// log(1 + exp(v)) without overflow for large |v|.
#[inline]
pub fn log1pexp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// exp(v) / (1 + exp(v)) evaluated from the sign-stable branch.
#[inline]
pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// ln C(n, y) summed over the shorter tail; exact enough for counts into the
/// tens of thousands.
pub fn ln_choose(n: u32, y: u32) -> f64 {
    debug_assert!(y <= n);
    let k = y.min(n - y);
    let mut acc = 0.0;
    for i in 0..k {
        acc += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    acc
}

/// Cached ln C(n_t, y) for every attainable count at one (item, occasion).
#[derive(Debug, Clone)]
pub struct LnChooseTable {
    table: Vec<f64>,
}

impl LnChooseTable {
    pub fn for_trials(n: u32) -> Self {
        LnChooseTable {
            table: (0..=n).map(|y| ln_choose(n, y)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, y: u32) -> f64 {
        self.table[y as usize]
    }
}

/// Binomial log-pmf with logit-scale parameter `v`:
/// log C(n, y) + y v - n log(1 + e^v).
pub fn binomial_logpmf(y: u32, trials: u32, v: f64) -> Result<f64> {
    if trials < 1 {
        return Err(Error::input(format!("trials must be >= 1, got {trials}")));
    }
    if y > trials {
        return Err(Error::input(format!(
            "count {y} exceeds trials {trials}"
        )));
    }
    Ok(ln_choose(trials, y) + y as f64 * v - trials as f64 * log1pexp(v))
}

/// Normal log-density with mean `v` and variance `sigma2`.
pub fn normal_logpdf(y: f64, v: f64, sigma2: f64) -> Result<f64> {
    if sigma2 <= 0.0 {
        return Err(Error::input(format!(
            "residual variance must be positive, got {sigma2}"
        )));
    }
    let z = y - v;
    Ok(-0.5 * LN_2PI - 0.5 * sigma2.ln() - z * z / (2.0 * sigma2))
}

/// Log-likelihood of one individual's complete record given the latent
/// vector: the sum of per-cell family log-densities.
pub fn conditional_loglik(
    data: &PanelDataset,
    i: usize,
    eta: &DVector<f64>,
    spec: &ModelSpec,
    params: &ParameterSet,
) -> Result<f64> {
    let mut total = 0.0;
    for (j, item) in spec.items.iter().enumerate() {
        for t in 0..item.occasions {
            let x = data.covariate_row(i, j, t);
            let v = linear_predictor(spec, params, eta, j, t, &x)?;
            let y = data.value(i, j, t);
            total += match item.family {
                Family::Binomial => binomial_logpmf(y as u32, item.trials[t], v)?,
                Family::Normal => normal_logpdf(y, v, params.sigma2_at(spec, j, t))?,
            };
        }
    }
    Ok(total)
}

/// Full multivariate-normal log-density of the latent vector, constant
/// included so that marginal likelihoods are comparable across models.
pub fn latent_logprior(eta: &DVector<f64>, mu: &DVector<f64>, psi: &DMatrix<f64>) -> Result<f64> {
    let d = eta.len();
    if mu.len() != d || psi.nrows() != d || psi.ncols() != d {
        return Err(Error::input(format!(
            "dimension mismatch: eta {d}, mu {}, psi {}x{}",
            mu.len(),
            psi.nrows(),
            psi.ncols()
        )));
    }
    let chol = psi
        .clone()
        .cholesky()
        .ok_or_else(|| Error::not_pd("latent covariance", ""))?;
    let log_det = 2.0 * chol.l().diagonal().map(f64::ln).sum();
    let diff = eta - mu;
    let solved = chol.solve(&diff);
    let quad = diff.dot(&solved);
    Ok(-0.5 * (d as f64 * LN_2PI + log_det + quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ItemSpec, LoadingScheme};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn binomial_half_probability_cases() {
        // y=1, n=2, v=0: p = 1/2, pmf = 2 * 0.25
        assert_relative_eq!(
            binomial_logpmf(1, 2, 0.0).unwrap(),
            0.5f64.ln(),
            max_relative = 1e-14
        );
        // y=0, n=8, v=0
        assert_relative_eq!(
            binomial_logpmf(0, 8, 0.0).unwrap(),
            8.0 * 0.5f64.ln(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn binomial_matches_high_precision_reference() {
        // reference value computed at 50-digit precision
        assert_relative_eq!(
            binomial_logpmf(5, 8, 0.7).unwrap(),
            -1.300136700348513912170201,
            epsilon = 1e-13
        );
    }

    #[test]
    fn binomial_rejects_out_of_range_count() {
        assert!(binomial_logpmf(9, 8, 0.0).is_err());
        assert!(binomial_logpmf(0, 0, 0.0).is_err());
    }

    #[test]
    fn binomial_stable_at_extreme_logits() {
        for &v in &[-40.0, -37.5, 37.5, 40.0, -300.0, 300.0] {
            let l = binomial_logpmf(3, 8, v).unwrap();
            assert!(l.is_finite() || l == f64::NEG_INFINITY);
            // the y achieving the mode must stay finite
            let mode = if v > 0.0 { 8 } else { 0 };
            assert!(binomial_logpmf(mode, 8, v).unwrap().is_finite());
        }
    }

    proptest! {
        #[test]
        fn binomial_pmf_sums_to_one(v in -30.0f64..30.0, n in 1u32..25) {
            let total: f64 = (0..=n)
                .map(|y| binomial_logpmf(y, n, v).unwrap().exp())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-12, "sum = {total}");
        }
    }

    #[test]
    fn normal_reference_points() {
        assert_relative_eq!(
            normal_logpdf(1.5, 1.5, 1.0).unwrap(),
            -0.5 * LN_2PI,
            max_relative = 1e-14
        );
        let s2 = 2.7f64;
        assert_relative_eq!(
            normal_logpdf(1.0 + s2.sqrt(), 1.0, s2).unwrap(),
            -0.5 * LN_2PI - 0.5 * s2.ln() - 0.5,
            max_relative = 1e-14
        );
        // reference value computed at 50-digit precision
        assert_relative_eq!(
            normal_logpdf(23.98, 20.98, 10.080).unwrap(),
            -2.520643735954855449116153,
            epsilon = 1e-14
        );
    }

    #[test]
    fn normal_rejects_bad_variance() {
        assert!(normal_logpdf(0.0, 0.0, 0.0).is_err());
        assert!(normal_logpdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn normal_integrates_to_one() {
        // midpoint rule over +-12 sd
        for &(v, s2) in &[(0.0f64, 1.0f64), (2.3, 0.4), (-5.0, 9.0)] {
            let sd = s2.sqrt();
            let kpts = 20_000;
            let (a, b) = (v - 12.0 * sd, v + 12.0 * sd);
            let h = (b - a) / kpts as f64;
            let total: f64 = (0..kpts)
                .map(|k| normal_logpdf(a + (k as f64 + 0.5) * h, v, s2).unwrap().exp() * h)
                .sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-10);
        }
    }

    fn toy_spec() -> (ModelSpec, ParameterSet) {
        let spec = ModelSpec::new(
            vec![
                ItemSpec::binomial("c", vec![8, 12, 14], 1),
                ItemSpec::normal("g", 3, 1),
            ],
            1,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let mut p = ParameterSet::neutral(&spec);
        p.mu_beta = DVector::from_vec(vec![0.2, -0.4, 24.0, -0.1]);
        p.loadings[0][(0, 0)] = 0.5;
        p.loadings[1][(0, 0)] = 2.5;
        p.sigma2[1] = vec![10.0, 9.9, 14.5];
        (spec, p)
    }

    fn toy_data(spec: &ModelSpec) -> PanelDataset {
        PanelDataset::new(
            spec,
            vec!["a".into(), "b".into()],
            vec![
                crate::model::ItemData {
                    values: DMatrix::from_row_slice(2, 3, &[4.0, 6.0, 2.0, 1.0, 0.0, 14.0]),
                    covariates: vec![],
                },
                crate::model::ItemData {
                    values: DMatrix::from_row_slice(2, 3, &[22.5, 25.0, 19.75, 28.0, 27.0, 30.0]),
                    covariates: vec![],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn conditional_is_sum_of_cells() {
        let (spec, p) = toy_spec();
        let data = toy_data(&spec);
        let eta = DVector::from_vec(vec![0.3, -0.2, 23.0, 0.5, -1.1]);
        for i in 0..2 {
            let total = conditional_loglik(&data, i, &eta, &spec, &p).unwrap();
            let mut cells = Vec::new();
            for (j, item) in spec.items.iter().enumerate() {
                for t in 0..item.occasions {
                    let v = linear_predictor(&spec, &p, &eta, j, t, &[]).unwrap();
                    let y = data.value(i, j, t);
                    cells.push(match item.family {
                        Family::Binomial => binomial_logpmf(y as u32, item.trials[t], v).unwrap(),
                        Family::Normal => {
                            normal_logpdf(y, v, p.sigma2_at(&spec, j, t)).unwrap()
                        }
                    });
                }
            }
            let by_hand: f64 = cells.iter().sum();
            assert_relative_eq!(total, by_hand, max_relative = 1e-13);
            // additivity is order-free
            cells.reverse();
            let reversed: f64 = cells.iter().sum();
            assert_relative_eq!(total, reversed, epsilon = 1e-12);
        }
    }

    #[test]
    fn conditional_degenerates_to_single_cell() {
        let spec = ModelSpec::new(
            vec![ItemSpec::binomial("c", vec![6], 0)],
            0,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let p = ParameterSet::neutral(&spec);
        let data = PanelDataset::new(
            &spec,
            vec!["a".into()],
            vec![crate::model::ItemData {
                values: DMatrix::from_row_slice(1, 1, &[4.0]),
                covariates: vec![],
            }],
        )
        .unwrap();
        let eta = DVector::from_vec(vec![0.9]);
        assert_relative_eq!(
            conditional_loglik(&data, 0, &eta, &spec, &p).unwrap(),
            binomial_logpmf(4, 6, 0.9).unwrap(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn conditional_at_exact_mean_is_constant_part() {
        let spec = ModelSpec::new(
            vec![ItemSpec::normal("g", 3, 1)],
            0,
            LoadingScheme::TimeInvariant,
        )
        .unwrap();
        let mut p = ParameterSet::neutral(&spec);
        p.sigma2[0] = vec![1.5, 2.5, 3.5];
        let eta = DVector::from_vec(vec![4.0, 1.0]);
        // data lying exactly on the latent trajectory
        let vals: Vec<f64> = (0..3).map(|t| 4.0 + t as f64).collect();
        let data = PanelDataset::new(
            &spec,
            vec!["a".into()],
            vec![crate::model::ItemData {
                values: DMatrix::from_row_slice(1, 3, &vals),
                covariates: vec![],
            }],
        )
        .unwrap();
        let expect: f64 = p.sigma2[0]
            .iter()
            .map(|s2| -0.5 * LN_2PI - 0.5 * s2.ln())
            .sum();
        assert_relative_eq!(
            conditional_loglik(&data, 0, &eta, &spec, &p).unwrap(),
            expect,
            max_relative = 1e-14
        );
    }

    #[test]
    fn logprior_reference_points() {
        let d = 3;
        let mu = DVector::zeros(d);
        let psi = DMatrix::identity(d, d);
        assert_relative_eq!(
            latent_logprior(&mu.clone(), &mu, &psi).unwrap(),
            -0.5 * d as f64 * LN_2PI,
            max_relative = 1e-14
        );
        let psi1 = DMatrix::from_row_slice(1, 1, &[4.0]);
        assert_relative_eq!(
            latent_logprior(
                &DVector::from_vec(vec![2.0]),
                &DVector::zeros(1),
                &psi1
            )
            .unwrap(),
            -0.5 * LN_2PI - 0.5 * 4.0f64.ln() - 0.5,
            max_relative = 1e-14
        );
    }

    #[test]
    fn logprior_matches_high_precision_reference() {
        // Psi = A A' for a fixed integer lower-triangular A; reference value
        // computed at 50-digit precision via explicit inverse and determinant.
        let psi = DMatrix::from_row_slice(
            5,
            5,
            &[
                4.0, 2.0, 0.0, 0.0, 2.0, //
                2.0, 5.0, 2.0, 0.0, 1.0, //
                0.0, 2.0, 5.0, 2.0, 0.0, //
                0.0, 0.0, 2.0, 5.0, 2.0, //
                2.0, 1.0, 0.0, 2.0, 6.0,
            ],
        );
        let eta = DVector::from_vec(vec![0.3, -1.2, 0.7, 2.0, -0.4]);
        let mu = DVector::from_vec(vec![0.1, 0.0, -0.5, 1.0, 0.2]);
        assert_relative_eq!(
            latent_logprior(&eta, &mu, &psi).unwrap(),
            -8.773182475073090255987809,
            epsilon = 1e-12
        );
    }

    #[test]
    fn logprior_rejects_non_pd() {
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let z = DVector::zeros(2);
        assert!(latent_logprior(&z, &z, &psi).is_err());
    }

    #[test]
    fn logprior_maximized_at_mean() {
        let psi = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let mu = DVector::from_vec(vec![0.5, -0.5]);
        let at_mean = latent_logprior(&mu, &mu, &psi).unwrap();
        for k in 0..20 {
            let delta = DVector::from_fn(2, |r, _| ((k * 2 + r) as f64).sin());
            let off = latent_logprior(&(&mu + delta * 0.7), &mu, &psi).unwrap();
            assert!(off < at_mean);
        }
    }
}
