//! Post-fit inference on the selected moments: the sandwich matrix over the
//! selected equations, the correctable bias of the penalized solution, and
//! Wald standard errors for the nonzero parameters.

use serde::Serialize;
use thiserror::Error;

use crate::elcore::{ElError, FitResult};
use crate::linalg::{cholesky, cholesky_inverse, symmetric_eigenvalues, Mat};
use crate::models::{Dataset, EstimatingModel, ModelError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("no nonzero parameters; nothing to infer")]
    EmptyThetaSupport,
    #[error("no selected moments; the bias correction is undefined")]
    EmptyLambdaSupport,
    #[error("under-identified on selected moments: |R| = {r} < |S| = {s}")]
    UnderIdentified { r: usize, s: usize },
    #[error("covariance of the selected moments is singular beyond jitter (condition {condition:.3e})")]
    SingularCovariance { condition: f64 },
    #[error(transparent)]
    El(#[from] ElError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("confidence level must lie strictly in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("parameter index {0} is not in the fitted support")]
    NotInSupport(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceResult<F> {
    /// Selected moments (support of the fitted multiplier).
    pub r_set: Vec<usize>,
    /// Nonzero parameter indices, aligned with the vectors below.
    pub s_set: Vec<usize>,
    /// s x s information matrix over the selected moments.
    pub j_hat: Mat<F>,
    pub psi_hat: Vec<F>,
    /// Bias-corrected estimates of the supported parameters.
    pub theta_corrected: Vec<F>,
    pub se: Vec<F>,
    /// Condition number of the selected-moment covariance.
    pub condition_number: F,
}

fn inverse_with_jitter<F: Real>(a: &Mat<F>) -> Result<Mat<F>, InferenceError> {
    if let Some(l) = cholesky(a) {
        return Ok(cholesky_inverse(&l));
    }
    let m = a.rows;
    let trace: F = (0..m).map(|i| a.at(i, i)).sum();
    let mut jitter = F::of(1e-8) * trace.abs().max(F::one()) / F::of_usize(m);
    for _ in 0..6 {
        let mut b = a.clone();
        for i in 0..m {
            *b.at_mut(i, i) = b.at(i, i) + jitter;
        }
        if let Some(l) = cholesky(&b) {
            return Ok(cholesky_inverse(&l));
        }
        jitter = jitter * F::of(10.0);
    }
    let eig = symmetric_eigenvalues(a);
    let cond = (eig[m - 1] / eig[0].max(F::of(1e-300))).as_f64().abs();
    Err(InferenceError::SingularCovariance { condition: cond })
}

/// Bias correction and standard errors at a fitted solution, built from the
/// selected moments only: with `V = n^-1 sum g_R g_R'`, `D` the mean Jacobian
/// of the selected moments in the supported parameters, and
/// `u = n^-1 sum g_R / (1 + lambda' g)`,
///
/// ```text
/// J = D' V^-1 D,  psi = J^-1 D' V^-1 u,  se_k = sqrt((J^-1)_kk / n).
/// ```
pub fn compute_inference<F: Real>(
    model: &EstimatingModel<F>,
    data: &Dataset<F>,
    fit: &FitResult<F>,
) -> Result<InferenceResult<F>, InferenceError> {
    let s_set = fit.theta_support.clone();
    let r_set = fit.lambda_support.clone();
    if s_set.is_empty() {
        return Err(InferenceError::EmptyThetaSupport);
    }
    if r_set.is_empty() {
        return Err(InferenceError::EmptyLambdaSupport);
    }
    let (s, m) = (s_set.len(), r_set.len());
    if m < s {
        return Err(InferenceError::UnderIdentified { r: m, s });
    }
    let n = data.n();
    let nf = F::of_usize(n);

    let mut v_hat = Mat::<F>::zeros(m, m);
    let mut d_bar = Mat::zeros(m, s);
    let mut u = vec![F::zero(); m];
    let mut g = vec![F::zero(); model.r];
    let mut col = vec![F::zero(); model.r];
    for i in 0..n {
        let row = data.row(i);
        model.eval_g_into(row, &fit.theta_hat, &mut g)?;
        let mut t = F::one();
        for j in 0..model.r {
            t = t + fit.lambda_hat[j] * g[j];
        }
        for (a, &ja) in r_set.iter().enumerate() {
            for (b, &jb) in r_set.iter().enumerate() {
                *v_hat.at_mut(a, b) = v_hat.at(a, b) + g[ja] * g[jb];
            }
            u[a] = u[a] + g[ja] / t;
        }
        for (b, &k) in s_set.iter().enumerate() {
            model.eval_dg_column_into(row, k, &mut col)?;
            for (a, &ja) in r_set.iter().enumerate() {
                *d_bar.at_mut(a, b) = d_bar.at(a, b) + col[ja];
            }
        }
    }
    for x in v_hat.data.iter_mut() {
        *x = *x / nf;
    }
    for x in d_bar.data.iter_mut() {
        *x = *x / nf;
    }
    for x in u.iter_mut() {
        *x = *x / nf;
    }

    let eig = symmetric_eigenvalues(&v_hat);
    let condition_number = (eig[m - 1] / eig[0].abs().max(F::of(1e-300))).abs();
    let v_inv = inverse_with_jitter(&v_hat)?;

    let dt = d_bar.transpose();
    let dtv = dt.matmul(&v_inv);
    let mut j_hat = dtv.matmul(&d_bar);
    for a in 0..s {
        for b in 0..a {
            let mid = (j_hat.at(a, b) + j_hat.at(b, a)) / F::of(2.0);
            *j_hat.at_mut(a, b) = mid;
            *j_hat.at_mut(b, a) = mid;
        }
    }
    let j_inv = inverse_with_jitter(&j_hat)?;
    let psi_hat = j_inv.matvec(&dtv.matvec(&u));
    let theta_corrected: Vec<F> =
        s_set.iter().zip(psi_hat.iter()).map(|(&k, &ps)| fit.theta_hat[k] - ps).collect();
    let se: Vec<F> = (0..s).map(|k| (j_inv.at(k, k) / nf).sqrt()).collect();

    Ok(InferenceResult { r_set, s_set, j_hat, psi_hat, theta_corrected, se, condition_number })
}

/// Standard normal quantile by Wichura's AS 241 rational approximation
/// (double-precision branch; absolute error well below 1e-9).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must lie in (0, 1)");
    // Horner evaluation, coefficients from highest degree down.
    fn poly(coef: &[f64], x: f64) -> f64 {
        coef.iter().fold(0.0, |acc, &c| acc * x + c)
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = poly(
            &[
                2.509_080_928_730_122_7e3,
                3.343_057_558_358_813e4,
                6.726_577_092_700_87e4,
                4.592_195_393_154_987e4,
                1.373_169_376_550_946e4,
                1.971_590_950_306_551_3e3,
                1.331_416_678_917_843_8e2,
                3.387_132_872_796_366_5,
            ],
            r,
        );
        let den = poly(
            &[
                5.226_495_278_852_545_5e3,
                2.872_908_573_572_194_3e4,
                3.930_789_580_009_271e4,
                2.121_379_430_158_659_7e4,
                5.394_196_021_424_751e3,
                6.871_870_074_920_579e2,
                4.231_333_070_160_091e1,
                1.0,
            ],
            r,
        );
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(
            &[
                7.745_450_142_783_414e-4,
                2.272_384_498_926_918_4e-2,
                2.417_807_251_774_506e-1,
                1.270_458_252_452_368_4,
                3.647_848_324_763_204_5,
                5.769_497_221_460_691,
                4.630_337_846_156_546,
                1.423_437_110_749_683_5,
            ],
            r,
        ) / poly(
            &[
                1.050_750_071_644_416_9e-9,
                5.475_938_084_995_345e-4,
                1.519_866_656_361_645_7e-2,
                1.481_039_764_274_800_8e-1,
                6.897_673_349_851e-1,
                1.676_384_830_183_803_8,
                2.053_191_626_637_758_8,
                1.0,
            ],
            r,
        )
    } else {
        let r = r - 5.0;
        poly(
            &[
                2.010_334_399_292_288_1e-7,
                2.711_555_568_743_487_6e-5,
                1.242_660_947_388_078_4e-3,
                2.653_218_952_657_612_4e-2,
                2.965_605_718_285_048_7e-1,
                1.784_826_539_917_291_3,
                5.463_784_911_164_114,
                6.657_904_643_501_103,
            ],
            r,
        ) / poly(
            &[
                2.044_263_103_389_939_7e-15,
                1.421_511_758_316_446e-7,
                1.846_318_317_510_054_8e-5,
                7.868_691_311_456_133e-4,
                1.487_536_129_085_061_5e-2,
                1.369_298_809_227_358e-1,
                5.998_322_065_558_88e-1,
                1.0,
            ],
            r,
        )
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Two-sided Wald interval for supported parameter `k` (an index into the
/// original parameter vector).
pub fn wald_interval<F: Real>(
    inf: &InferenceResult<F>,
    k: usize,
    level: f64,
) -> Result<(F, F), InferenceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::BadLevel(level));
    }
    let pos =
        inf.s_set.iter().position(|&s| s == k).ok_or(InferenceError::NotInSupport(k))?;
    let z = F::of(normal_quantile((1.0 + level) / 2.0));
    let half = z * inf.se[pos];
    let mid = inf.theta_corrected[pos];
    Ok((mid - half, mid + half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::EstimatingModel;

    fn mean_fit(theta: Vec<f64>, lambda: Vec<f64>) -> FitResult<f64> {
        let theta_support = (0..theta.len()).filter(|&k| theta[k] != 0.0).collect();
        let lambda_support = (0..lambda.len()).filter(|&j| lambda[j] != 0.0).collect();
        FitResult {
            theta_hat: theta,
            lambda_hat: lambda,
            theta_support,
            lambda_support,
            objective: 0.0,
            n_cycles: 1,
            converged: true,
            trace: vec![],
        }
    }

    #[test]
    fn scalar_toy_matches_hand_values() {
        // g values 0.1 +- sqrt(1.99): mean g = 0.1, mean g^2 = 2, grad = -1
        let a = 1.99f64.sqrt();
        let model = EstimatingModel::mean(1).unwrap();
        let data = Dataset::from_rows(vec![vec![1.0 + 0.1 + a], vec![1.0 + 0.1 - a]]).unwrap();
        let fit = mean_fit(vec![1.0], vec![1e-9]);
        let inf = compute_inference(&model, &data, &fit).unwrap();
        assert!((inf.j_hat.at(0, 0) - 0.5).abs() < 1e-6);
        assert!((inf.psi_hat[0] + 0.1).abs() < 1e-6);
        assert!((inf.theta_corrected[0] - 1.1).abs() < 1e-6);
        // se = sqrt(J^-1 / n) = sqrt(2/2)
        assert!((inf.se[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_mean_residual_gives_zero_bias() {
        let model = EstimatingModel::mean(1).unwrap();
        let data = Dataset::from_rows(vec![vec![1.5], vec![0.5]]).unwrap();
        let fit = mean_fit(vec![1.0], vec![1e-12]);
        let inf = compute_inference(&model, &data, &fit).unwrap();
        assert!(inf.psi_hat[0].abs() < 1e-9);
    }

    #[test]
    fn mean_model_j_is_inverse_covariance() {
        let model = EstimatingModel::mean(2).unwrap();
        let rows = vec![
            vec![4.2, 3.1],
            vec![5.9, 4.4],
            vec![5.0, 3.6],
            vec![4.5, 4.3],
        ];
        let data = Dataset::from_rows(rows).unwrap();
        let fit = mean_fit(vec![4.9, 3.85], vec![1e-10, 1e-10]);
        let inf = compute_inference(&model, &data, &fit).unwrap();
        // J = V^-1, so J V = I; rebuild V directly
        let n = data.n() as f64;
        let mut v = Mat::<f64>::zeros(2, 2);
        for i in 0..data.n() {
            let r = data.row(i);
            let g = [r[0] - 4.9, r[1] - 3.85];
            for a in 0..2 {
                for b in 0..2 {
                    *v.at_mut(a, b) += g[a] * g[b] / n;
                }
            }
        }
        let prod = inf.j_hat.matmul(&v);
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((prod.at(a, b) - want).abs() < 1e-8);
            }
        }
        assert!(inf.j_hat.max_abs_asymmetry() < 1e-10);
        let eig = symmetric_eigenvalues(&inf.j_hat);
        assert!(eig[0] >= -1e-10);
    }

    #[test]
    fn under_identification_is_an_error() {
        let model = EstimatingModel::mean(2).unwrap();
        let data = Dataset::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let fit = mean_fit(vec![1.5, 1.5], vec![0.1, 0.0]);
        assert!(matches!(
            compute_inference(&model, &data, &fit),
            Err(InferenceError::UnderIdentified { r: 1, s: 2 })
        ));
        let fit = mean_fit(vec![1.5, 1.5], vec![0.0, 0.0]);
        assert!(matches!(
            compute_inference(&model, &data, &fit),
            Err(InferenceError::EmptyLambdaSupport)
        ));
    }

    #[test]
    fn quantile_known_values() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((normal_quantile(0.5)).abs() < 1e-15);
        assert!((normal_quantile(0.999) - 3.090232306167814).abs() < 1e-9);
        for p in [0.001, 0.01, 0.2, 0.4, 0.7, 0.99] {
            assert!(
                (normal_quantile(p) + normal_quantile(1.0 - p)).abs() < 1e-9,
                "asymmetric at {p}"
            );
        }
    }

    #[test]
    fn wald_interval_examples() {
        let inf = InferenceResult {
            r_set: vec![0],
            s_set: vec![0],
            j_hat: Mat { rows: 1, cols: 1, data: vec![1.0] },
            psi_hat: vec![0.0],
            theta_corrected: vec![1.0],
            se: vec![0.1],
            condition_number: 1.0,
        };
        let (lo, hi): (f64, f64) = wald_interval(&inf, 0, 0.95).unwrap();
        assert!((lo - 0.804).abs() < 5e-4);
        assert!((hi - 1.196).abs() < 5e-4);
        // symmetric around the corrected point
        assert!(((lo + hi) / 2.0 - 1.0).abs() < 1e-12);
        // tiny level degenerates to the point estimate
        let (lo, hi): (f64, f64) = wald_interval(&inf, 0, 1e-12).unwrap();
        assert!((hi - lo).abs() < 1e-9);
        assert!(matches!(wald_interval(&inf, 3, 0.95), Err(InferenceError::NotInSupport(3))));
        assert!(matches!(wald_interval(&inf, 0, 1.5), Err(InferenceError::BadLevel(_))));
    }
}
