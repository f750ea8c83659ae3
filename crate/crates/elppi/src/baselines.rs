//! Comparator estimators from the prediction-powered family.
//!
//! The rectified estimating equation subtracts a scaled prediction-error
//! correction from the labeled score:
//!
//! ```text
//! mean_lab g(Y) - lambda { mean_lab g(Y~) - mean_unl g(Y~) } = 0
//! ```
//!
//! `lambda = 1` is the original prediction-powered estimator, `lambda = 0`
//! the supervised one, and the power-tuned variant picks the scalar that
//! minimizes the plug-in variance along this family. All three therefore
//! share one quadratic variance curve, which is evaluated consistently so
//! the tuned variant is never worse than either endpoint.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::el::SolverControls;
use crate::error::{Error, Result};
use crate::estimator::{self, supervised_init};
use crate::infer::{plugin_moments, sigma_hat, WaldInterval};
use crate::model::{MomentModel, PPIDataset};
use crate::numeric::{covariance, cross_covariance, normal_quantile, symmetrize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Supervised,
    Ppi,
    PpiPowerTuned,
}

/// A fitted comparator with its plug-in covariance and Wald intervals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineFit {
    pub method: BaselineMethod,
    pub theta_hat: Vec<f64>,
    /// Asymptotic covariance of the scaled estimator, row-major `p x p`.
    pub sigma_hat: Vec<Vec<f64>>,
    pub wald_ci: Vec<WaldInterval>,
    /// Tuning weight, present only for the power-tuned variant.
    pub lambda: Option<f64>,
    pub warnings: Vec<String>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn wald_intervals(theta: &DVector<f64>, sigma: &DMatrix<f64>, n: usize, alpha: f64) -> Vec<WaldInterval> {
    let z = normal_quantile(1.0 - alpha / 2.0);
    (0..theta.len())
        .map(|k| {
            let se = (sigma[(k, k)].max(0.0) / n as f64).sqrt();
            WaldInterval {
                estimate: theta[k],
                se,
                lo: theta[k] - z * se,
                hi: theta[k] + z * se,
            }
        })
        .collect()
}

/// Root of the unweighted labeled score with the sandwich covariance; an
/// over-identified score delegates to the profile fit and reports the
/// projected-information covariance.
pub fn fit_supervised(
    dataset: &PPIDataset,
    model: &MomentModel,
    alpha: f64,
    controls: &SolverControls,
) -> Result<BaselineFit> {
    dataset.validate()?;
    let elfit = estimator::fit_supervised(dataset, model, controls)?;
    let theta = elfit.theta_hat.clone();
    let aux = crate::auxiliary::AuxMatrix::empty(dataset.n());
    let pm = plugin_moments(dataset, model, &aux, &theta)?;
    let sigma = sigma_hat(&pm)?;
    Ok(BaselineFit {
        method: BaselineMethod::Supervised,
        theta_hat: theta.iter().cloned().collect(),
        sigma_hat: to_rows(&sigma),
        wald_ci: wald_intervals(&theta, &sigma, dataset.n(), alpha),
        lambda: None,
        warnings: elfit.notes,
    })
}

/// Moment pieces of the rectified family, all at one parameter value.
struct FamilyMoments {
    j_hat: DMatrix<f64>,
    cov_g: DMatrix<f64>,
    cov_g_gt: DMatrix<f64>,
    /// Pooled covariance of the predicted score over all `n + m` rows.
    cov_gt: DMatrix<f64>,
}

fn family_moments(dataset: &PPIDataset, model: &MomentModel, theta: &DVector<f64>) -> FamilyMoments {
    let g_lab = model.g_matrix(theta, &dataset.labeled_y, &dataset.labeled_x);
    let gt_lab = model.g_matrix(theta, &dataset.labeled_ytilde, &dataset.labeled_x);
    let gt_unl = model.g_matrix(theta, &dataset.unlabeled_ytilde, &dataset.unlabeled_x);
    let n = dataset.n();
    let m = dataset.m();
    let q = model.q();
    let mut pooled = DMatrix::zeros(n + m, q);
    pooled.rows_mut(0, n).copy_from(&gt_lab);
    pooled.rows_mut(n, m).copy_from(&gt_unl);
    FamilyMoments {
        j_hat: model.jacobian_mean(theta, &dataset.labeled_y, &dataset.labeled_x),
        cov_g: covariance(&g_lab),
        cov_g_gt: cross_covariance(&g_lab, &gt_lab),
        cov_gt: covariance(&pooled),
    }
}

/// Plug-in covariance along the family at tuning weight `lambda`.
fn family_sigma(fm: &FamilyMoments, lambda: f64, n_over_m: f64) -> Result<DMatrix<f64>> {
    let jinv = fm.j_hat.clone().lu().try_inverse().ok_or_else(|| {
        Error::Numerical("score Jacobian is rank-deficient; a full-rank p x p Jacobian is required".into())
    })?;
    let inner = &fm.cov_g - (&fm.cov_g_gt + fm.cov_g_gt.transpose()) * lambda
        + &fm.cov_gt * (lambda * lambda * (1.0 + n_over_m));
    Ok(symmetrize(&(&jinv * inner * jinv.transpose())))
}

/// Damped Newton on the rectified equation at a fixed tuning weight.
fn rectified_root(
    dataset: &PPIDataset,
    model: &MomentModel,
    lambda: f64,
    start: &DVector<f64>,
    controls: &SolverControls,
) -> Result<DVector<f64>> {
    let score = |theta: &DVector<f64>| -> DVector<f64> {
        let mean_of = |ys: &DVector<f64>, xs: &DMatrix<f64>| -> DVector<f64> {
            let g = model.g_matrix(theta, ys, xs);
            DVector::from_fn(g.ncols(), |k, _| g.column(k).mean())
        };
        let lab = mean_of(&dataset.labeled_y, &dataset.labeled_x);
        let lab_t = mean_of(&dataset.labeled_ytilde, &dataset.labeled_x);
        let unl_t = mean_of(&dataset.unlabeled_ytilde, &dataset.unlabeled_x);
        lab - (lab_t - unl_t) * lambda
    };
    let jac = |theta: &DVector<f64>| -> DMatrix<f64> {
        let lab = model.jacobian_mean(theta, &dataset.labeled_y, &dataset.labeled_x);
        let lab_t = model.jacobian_mean(theta, &dataset.labeled_ytilde, &dataset.labeled_x);
        let unl_t = model.jacobian_mean(theta, &dataset.unlabeled_ytilde, &dataset.unlabeled_x);
        lab - (lab_t - unl_t) * lambda
    };

    let mut theta = model.project(start);
    let mut f = score(&theta);
    let tol = controls.outer_tol * f.norm().max(1.0);
    for _ in 0..controls.max_outer_iters {
        if f.norm() <= tol {
            return Ok(theta);
        }
        let j = jac(&theta);
        let step = j
            .clone()
            .lu()
            .solve(&f)
            .ok_or_else(|| Error::Numerical("rectified Jacobian is singular".into()))?;
        let mut scale = 1.0;
        let mut advanced = false;
        for _ in 0..60 {
            let trial = model.project(&(&theta - &step * scale));
            let f_trial = score(&trial);
            if f_trial.norm() < f.norm() {
                theta = trial;
                f = f_trial;
                advanced = true;
                break;
            }
            scale *= 0.5;
        }
        if !advanced {
            break;
        }
    }
    if f.norm() <= 1e-6 * f.norm().max(1.0) || f.norm() <= tol {
        return Ok(theta);
    }
    Err(Error::NoConvergence(
        "rectified score iteration stalled".into(),
    ))
}

fn family_fit(
    dataset: &PPIDataset,
    model: &MomentModel,
    method: BaselineMethod,
    lambda: f64,
    alpha: f64,
    controls: &SolverControls,
    mut warnings: Vec<String>,
) -> Result<BaselineFit> {
    let start = supervised_init(dataset, model, controls)?;
    let theta = if lambda == 0.0 {
        start
    } else {
        rectified_root(dataset, model, lambda, &start, controls)?
    };
    let fm = family_moments(dataset, model, &theta);
    let n_over_m = dataset.n() as f64 / dataset.m() as f64;
    let sigma = family_sigma(&fm, lambda, n_over_m)?;
    if !matches!(method, BaselineMethod::Supervised) && dataset.m() == 0 {
        warnings.push("no unlabeled rows; the fit degenerates to supervised".into());
    }
    Ok(BaselineFit {
        method,
        theta_hat: theta.iter().cloned().collect(),
        sigma_hat: to_rows(&sigma),
        wald_ci: wald_intervals(&theta, &sigma, dataset.n(), alpha),
        lambda: match method {
            BaselineMethod::PpiPowerTuned => Some(lambda),
            _ => None,
        },
        warnings,
    })
}

/// The original prediction-powered estimator (`lambda = 1`).
pub fn fit_ppi(
    dataset: &PPIDataset,
    model: &MomentModel,
    alpha: f64,
    controls: &SolverControls,
) -> Result<BaselineFit> {
    dataset.validate()?;
    if model.over_identified() {
        return Err(Error::InvalidArgument(
            "the rectified family requires a square score".into(),
        ));
    }
    if dataset.m() == 0 {
        let mut fit = fit_supervised(dataset, model, alpha, controls)?;
        fit.method = BaselineMethod::Ppi;
        fit.warnings
            .push("no unlabeled rows; the fit degenerates to supervised".into());
        return Ok(fit);
    }
    family_fit(dataset, model, BaselineMethod::Ppi, 1.0, alpha, controls, Vec::new())
}

/// Power-tuned variant: the tuning weight minimizes the plug-in variance
/// trace over the family, clipped to `[0, 1]`.
pub fn fit_ppi_power_tuned(
    dataset: &PPIDataset,
    model: &MomentModel,
    alpha: f64,
    controls: &SolverControls,
) -> Result<BaselineFit> {
    dataset.validate()?;
    if model.over_identified() {
        return Err(Error::InvalidArgument(
            "the rectified family requires a square score".into(),
        ));
    }
    if dataset.m() == 0 {
        let mut fit = fit_supervised(dataset, model, alpha, controls)?;
        fit.method = BaselineMethod::PpiPowerTuned;
        fit.lambda = Some(0.0);
        fit.warnings
            .push("no unlabeled rows; the fit degenerates to supervised".into());
        return Ok(fit);
    }
    let pilot = supervised_init(dataset, model, controls)?;
    let fm = family_moments(dataset, model, &pilot);
    let n_over_m = dataset.n() as f64 / dataset.m() as f64;
    let denom = (1.0 + n_over_m) * fm.cov_gt.trace();
    let mut warnings = Vec::new();
    let lambda = if denom <= 0.0 {
        warnings.push("predicted scores carry no variance; tuning weight set to zero".into());
        0.0
    } else {
        (fm.cov_g_gt.trace() / denom).clamp(0.0, 1.0)
    };
    family_fit(
        dataset,
        model,
        BaselineMethod::PpiPowerTuned,
        lambda,
        alpha,
        controls,
        warnings,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_linreg_model, builtin_mean_model};
    use crate::numeric::rep_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn mean_ds(y: Vec<f64>, yt: Vec<f64>, u_yt: Vec<f64>) -> PPIDataset {
        let n = y.len();
        let m = u_yt.len();
        PPIDataset::new(
            DVector::from_vec(y),
            DMatrix::zeros(n, 0),
            DVector::from_vec(yt),
            DMatrix::zeros(m, 0),
            DVector::from_vec(u_yt),
        )
        .unwrap()
    }

    #[test]
    fn supervised_mean_is_the_sample_mean_with_population_variance() {
        let data = mean_ds(vec![0.0, 1.0, 2.0], vec![0.0; 3], vec![]);
        let fit = fit_supervised(&data, &builtin_mean_model(), 0.1, &SolverControls::default())
            .unwrap();
        assert_abs_diff_eq!(fit.theta_hat[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.sigma_hat[0][0], 2.0 / 3.0, epsilon = 1e-12);
        assert!(fit.wald_ci[0].lo < 1.0 && 1.0 < fit.wald_ci[0].hi);
    }

    #[test]
    fn supervised_linreg_recovers_exact_coefficients_on_noiseless_data() {
        let mut rng = rep_rng(3, 0);
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| 2.0 * x[(i, 0)] - 0.5 * x[(i, 1)]);
        let data = PPIDataset::new(
            y.clone(),
            x,
            y,
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let fit = fit_supervised(
            &data,
            &builtin_linreg_model(2),
            0.05,
            &SolverControls::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(fit.theta_hat[0], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.theta_hat[1], -0.5, epsilon = 1e-8);
    }

    #[test]
    fn ppi_mean_matches_the_closed_form() {
        let data = mean_ds(vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0], vec![2.0, 2.0]);
        let fit = fit_ppi(&data, &builtin_mean_model(), 0.1, &SolverControls::default()).unwrap();
        assert_abs_diff_eq!(fit.theta_hat[0], 3.0, epsilon = 1e-10);
    }

    #[test]
    fn ppi_reduces_to_supervised_when_prediction_means_agree() {
        let data = mean_ds(vec![1.0, 2.0, 6.0], vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]);
        let fit = fit_ppi(&data, &builtin_mean_model(), 0.1, &SolverControls::default()).unwrap();
        assert_abs_diff_eq!(fit.theta_hat[0], 3.0, epsilon = 1e-10);
    }

    #[test]
    fn perfect_predictions_cancel_the_labeled_error() {
        let data = mean_ds(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]);
        let fit = fit_ppi(&data, &builtin_mean_model(), 0.1, &SolverControls::default()).unwrap();
        // The labeled terms cancel, leaving the unlabeled prediction mean.
        assert_abs_diff_eq!(fit.theta_hat[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn closed_form_agreement_on_random_mean_instances() {
        let mut rng = rep_rng(41, 0);
        for _ in 0..30 {
            let n = rng.random_range(5..40);
            let m = rng.random_range(2..60);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let yt: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ut: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let want = y.iter().sum::<f64>() / n as f64 - yt.iter().sum::<f64>() / n as f64
                + ut.iter().sum::<f64>() / m as f64;
            let data = mean_ds(y, yt, ut);
            let fit =
                fit_ppi(&data, &builtin_mean_model(), 0.1, &SolverControls::default()).unwrap();
            assert_abs_diff_eq!(fit.theta_hat[0], want, epsilon = 1e-10);
        }
    }

    #[test]
    fn strong_predictions_push_the_tuning_weight_toward_one() {
        let mut rng = rep_rng(7, 0);
        let y: Vec<f64> = (0..400).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ut: Vec<f64> = (0..8000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let data = mean_ds(y.clone(), y, ut);
        let fit = fit_ppi_power_tuned(&data, &builtin_mean_model(), 0.1, &SolverControls::default())
            .unwrap();
        let lambda = fit.lambda.unwrap();
        assert!(lambda > 0.85, "lambda = {lambda}");
    }

    #[test]
    fn independent_predictions_push_the_tuning_weight_toward_zero() {
        let mut rng = rep_rng(8, 0);
        let y: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let yt: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ut: Vec<f64> = (0..400).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let data = mean_ds(y, yt, ut);
        let sup = fit_supervised(&data, &builtin_mean_model(), 0.1, &SolverControls::default())
            .unwrap();
        let fit = fit_ppi_power_tuned(&data, &builtin_mean_model(), 0.1, &SolverControls::default())
            .unwrap();
        let lambda = fit.lambda.unwrap();
        assert!(lambda < 0.15, "lambda = {lambda}");
        assert!((fit.theta_hat[0] - sup.theta_hat[0]).abs() < 0.1);
    }

    #[test]
    fn tuning_weight_matches_a_grid_search_over_the_variance_curve() {
        let mut rng = rep_rng(9, 0);
        let y: Vec<f64> = (0..30).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let yt: Vec<f64> = y
            .iter()
            .map(|v| 0.8 * v + 0.4 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let ut: Vec<f64> = (0..90).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = y.len() as f64;
        let m = ut.len() as f64;

        // The variance curve from scratch on the mean model.
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let my = mean(&y);
        let myt = mean(&yt);
        let var_y = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
        let cov = y
            .iter()
            .zip(&yt)
            .map(|(a, b)| (a - my) * (b - myt))
            .sum::<f64>()
            / n;
        let pooled: Vec<f64> = yt.iter().chain(&ut).cloned().collect();
        let mp = mean(&pooled);
        let var_p = pooled.iter().map(|v| (v - mp) * (v - mp)).sum::<f64>() / pooled.len() as f64;
        let objective =
            |l: f64| var_y - 2.0 * l * cov + l * l * (1.0 + n / m) * var_p;
        let mut best = (f64::INFINITY, 0.0);
        let mut l = 0.0;
        while l <= 1.0 + 1e-12 {
            let v = objective(l);
            if v < best.0 {
                best = (v, l);
            }
            l += 1e-4;
        }

        let data = mean_ds(y, yt, ut);
        let fit = fit_ppi_power_tuned(&data, &builtin_mean_model(), 0.1, &SolverControls::default())
            .unwrap();
        assert!(
            (fit.lambda.unwrap() - best.1).abs() <= 2e-4,
            "lambda {} vs grid {}",
            fit.lambda.unwrap(),
            best.1
        );
    }

    #[test]
    fn tuned_variance_never_exceeds_either_endpoint() {
        let mut rng = rep_rng(10, 0);
        for _ in 0..20 {
            let n = rng.random_range(15..60);
            let m = rng.random_range(20..120);
            let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let rho: f64 = rng.random_range(0.0..1.0);
            let yt: Vec<f64> = y
                .iter()
                .map(|v| rho * v + (1.0 - rho) * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let ut: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let data = mean_ds(y, yt, ut);
            let model = builtin_mean_model();
            let controls = SolverControls::default();
            let sup = fit_supervised(&data, &model, 0.1, &controls).unwrap();
            let ppi = fit_ppi(&data, &model, 0.1, &controls).unwrap();
            let tuned = fit_ppi_power_tuned(&data, &model, 0.1, &controls).unwrap();
            let v = |f: &BaselineFit| f.sigma_hat[0][0];
            assert!(v(&tuned) <= v(&sup).min(v(&ppi)) + 1e-10);
        }
    }

    #[test]
    fn without_unlabeled_rows_every_baseline_is_supervised() {
        let data = mean_ds(vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4], vec![]);
        let model = builtin_mean_model();
        let controls = SolverControls::default();
        let sup = fit_supervised(&data, &model, 0.1, &controls).unwrap();
        let ppi = fit_ppi(&data, &model, 0.1, &controls).unwrap();
        let tuned = fit_ppi_power_tuned(&data, &model, 0.1, &controls).unwrap();
        for fit in [&ppi, &tuned] {
            assert_abs_diff_eq!(fit.theta_hat[0], sup.theta_hat[0], epsilon = 1e-12);
            assert!(fit.warnings.iter().any(|w| w.contains("degenerates")));
        }
        assert_eq!(tuned.lambda, Some(0.0));
    }

    #[test]
    fn constant_predictions_turn_tuning_off() {
        let data = mean_ds(vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0], vec![5.0, 5.0]);
        let fit = fit_ppi_power_tuned(&data, &builtin_mean_model(), 0.1, &SolverControls::default())
            .unwrap();
        assert_eq!(fit.lambda, Some(0.0));
        assert_abs_diff_eq!(fit.theta_hat[0], 2.0, epsilon = 1e-12);
    }
}
