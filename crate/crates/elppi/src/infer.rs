//! Variance estimation and calibrated tests.
//!
//! Centering the auxiliary block at a pooled mean estimated from finitely
//! many rows changes both the asymptotic covariance of the estimator and
//! the limit of the likelihood-ratio statistic: the adjustment term is
//! scaled by the labeled fraction, and the ratio converges to a weighted
//! sum of chi-square variables rather than a plain chi-square. This module
//! computes the plug-in moments, both covariance forms (just- and
//! over-identified), the weight eigenvalues, a seeded Monte Carlo quantile
//! of the weighted limit, ratio statistics, inverted confidence sets, and
//! the safety certificate comparing against the supervised covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::auxiliary::AuxMatrix;
use crate::el::{solve_inner, SolverControls};
use crate::error::{Error, Result};
use crate::estimator::{stacked_constraints, ELFit};
use crate::model::{MomentModel, PPIDataset};
use crate::numeric::{
    covariance, cross_covariance, normal_quantile, psd_inv_sqrt, psd_pinv, psd_sqrt, rep_rng,
    sym_min_eig, symmetrize, PSD_REL_TOL,
};

/// Default Monte Carlo draw count for the weighted chi-square quantile.
pub const DEFAULT_MC_DRAWS: usize = 200_000;

/// Sample moments over the labeled rows at a fitted estimate.
#[derive(Debug, Clone)]
pub struct PluginMoments {
    /// Mean score Jacobian, `q x p`.
    pub j_hat: DMatrix<f64>,
    /// Score covariance, `q x q`, divisor `n`.
    pub cov_g: DMatrix<f64>,
    /// Auxiliary covariance, `r x r`.
    pub cov_h: DMatrix<f64>,
    /// Score-auxiliary cross covariance, `q x r`.
    pub cov_gh: DMatrix<f64>,
    /// `cov_g - cov_gh cov_h^+ cov_gh^T`; the residual score covariance
    /// after projecting on the auxiliary span.
    pub u_hat: DMatrix<f64>,
    /// Labeled fraction `n / (n + m)`.
    pub gamma_n: f64,
    /// Retained rank of `cov_h` after eigen-truncation.
    pub cov_h_rank: usize,
    pub warnings: Vec<String>,
}

impl PluginMoments {
    pub fn q(&self) -> usize {
        self.cov_g.nrows()
    }

    pub fn p(&self) -> usize {
        self.j_hat.ncols()
    }

    pub fn r(&self) -> usize {
        self.cov_h.nrows()
    }

    fn cov_h_pinv(&self) -> DMatrix<f64> {
        psd_pinv(&self.cov_h, PSD_REL_TOL).0
    }

    /// The auxiliary adjustment `cov_gh cov_h^+ cov_gh^T`.
    fn adjustment(&self) -> DMatrix<f64> {
        if self.r() == 0 {
            return DMatrix::zeros(self.q(), self.q());
        }
        symmetrize(&(&self.cov_gh * self.cov_h_pinv() * self.cov_gh.transpose()))
    }
}

/// Sample moments at `theta_hat` over the `n` labeled rows: mean Jacobian,
/// centered covariances with divisor `n`, and the labeled fraction. A
/// singular auxiliary covariance is handled downstream by eigen-truncation
/// and recorded here as a warning.
pub fn plugin_moments(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    theta_hat: &DVector<f64>,
) -> Result<PluginMoments> {
    if theta_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("estimate not finite".into()));
    }
    let g = model.g_matrix(theta_hat, &dataset.labeled_y, &dataset.labeled_x);
    let j_hat = model.jacobian_mean(theta_hat, &dataset.labeled_y, &dataset.labeled_x);
    let cov_g = covariance(&g);
    let r = aux.r();
    let (cov_h, cov_gh) = if r == 0 {
        (DMatrix::zeros(0, 0), DMatrix::zeros(model.q(), 0))
    } else {
        (covariance(&aux.hc), cross_covariance(&g, &aux.hc))
    };
    let (pinv, rank) = if r == 0 {
        (DMatrix::zeros(0, 0), 0)
    } else {
        psd_pinv(&cov_h, PSD_REL_TOL)
    };
    let mut warnings = Vec::new();
    if rank < r {
        warnings.push(format!(
            "auxiliary covariance rank {rank} < {r}; degenerate directions truncated"
        ));
    }
    let u_hat = if r == 0 {
        cov_g.clone()
    } else {
        symmetrize(&(&cov_g - &cov_gh * pinv * cov_gh.transpose()))
    };
    Ok(PluginMoments {
        j_hat,
        cov_g,
        cov_h,
        cov_gh,
        u_hat,
        gamma_n: dataset.gamma_n(),
        cov_h_rank: rank,
        warnings,
    })
}

fn inverted_j(pm: &PluginMoments) -> Result<DMatrix<f64>> {
    pm.j_hat.clone().lu().try_inverse().ok_or_else(|| {
        Error::Numerical("score Jacobian is rank-deficient; a full-rank p x p Jacobian is required".into())
    })
}

/// `J^T U^+ J` and `U^+ J`, shared by the over-identified formulas.
fn projected_information(pm: &PluginMoments) -> (DMatrix<f64>, DMatrix<f64>) {
    let (u_pinv, _) = psd_pinv(&pm.u_hat, PSD_REL_TOL);
    let uj = &u_pinv * &pm.j_hat;
    let b = symmetrize(&(pm.j_hat.transpose() * &uj));
    (b, uj)
}

/// Asymptotic covariance of the scaled estimator. Just-identified scores
/// use the direct sandwich-minus-adjustment form; over-identified scores
/// use the general form, whose just-identified specialization agrees with
/// the direct one.
pub fn sigma_hat(pm: &PluginMoments) -> Result<DMatrix<f64>> {
    if pm.q() == pm.p() {
        let jinv = inverted_j(pm)?;
        let inner = &pm.cov_g - pm.adjustment() * (1.0 - pm.gamma_n);
        return Ok(symmetrize(&(&jinv * inner * jinv.transpose())));
    }
    sigma_hat_general(pm)
}

/// The general covariance form, valid for any `q >= p`.
pub fn sigma_hat_general(pm: &PluginMoments) -> Result<DMatrix<f64>> {
    let (b, uj) = projected_information(pm);
    let b_inv = b.clone().lu().try_inverse().ok_or_else(|| {
        Error::Numerical("projected information J^T U^+ J is singular".into())
    })?;
    let a = uj.transpose() * pm.adjustment() * &uj;
    let sigma = &b_inv + &b_inv * a * &b_inv * pm.gamma_n;
    Ok(symmetrize(&sigma))
}

/// Eigenvalues of the limiting weight matrix for the ratio statistic,
/// sorted descending. They equal 1 exactly with no auxiliary information
/// (`r = 0` or a fully unlabeled limit).
pub fn lambda_hat(pm: &PluginMoments) -> Result<DVector<f64>> {
    let p = pm.p();
    if pm.r() == 0 || pm.gamma_n == 0.0 {
        return Ok(DVector::from_element(p, 1.0));
    }
    let (b, uj) = projected_information(pm);
    let m = if pm.q() == p {
        let jinv = inverted_j(pm)?;
        let b_sqrt = psd_sqrt(&b, PSD_REL_TOL);
        let core = &jinv * pm.adjustment() * jinv.transpose();
        DMatrix::identity(p, p) + &b_sqrt * core * &b_sqrt * pm.gamma_n
    } else {
        let b_inv_sqrt = psd_inv_sqrt(&b, PSD_REL_TOL);
        let core = uj.transpose() * pm.adjustment() * &uj;
        DMatrix::identity(p, p) + &b_inv_sqrt * core * &b_inv_sqrt * pm.gamma_n
    };
    let mut eig: Vec<f64> = symmetrize(&m).symmetric_eigen().eigenvalues.iter().cloned().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(DVector::from_vec(eig))
}

/// Monte Carlo `(1 - alpha)` quantile of `sum_j lambda_j xi_j^2` with
/// `xi_j` iid standard normal. Deterministic given the seed.
pub fn weighted_chisq_quantile(lambdas: &[f64], alpha: f64, mc_draws: usize, seed: u64) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must be in (0,1)");
    assert!(
        lambdas.iter().all(|l| l.is_finite() && *l >= 0.0),
        "weights must be finite and nonnegative"
    );
    assert!(mc_draws > 1);
    let mut rng = rep_rng(seed, 0);
    let mut draws = vec![0.0_f64; mc_draws];
    for d in draws.iter_mut() {
        let mut acc = 0.0;
        for &l in lambdas {
            let xi: f64 = rng.sample(StandardNormal);
            acc += l * xi * xi;
        }
        *d = acc;
    }
    // k-th smallest, 1-based k = ceil((1 - alpha) * draws).
    let k = ((1.0 - alpha) * mc_draws as f64).ceil() as usize;
    let k = k.clamp(1, mc_draws);
    let (_, kth, _) = draws.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
    *kth
}

/// Ratio statistic `T_n = 2 {l(theta_hat) - l(theta0)}`. An infeasible
/// constraint set at `theta0` gives `+inf`, excluding it from any
/// confidence set.
pub fn el_ratio_stat(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    theta0: &DVector<f64>,
    fit: &ELFit,
    controls: &SolverControls,
) -> Result<f64> {
    let cm = stacked_constraints(dataset, model, aux, theta0)?;
    let sol0 = match solve_inner(&cm, controls) {
        Ok(s) => s,
        Err(Error::Infeasible(_)) => return Ok(f64::INFINITY),
        Err(other) => return Err(other),
    };
    let t = 2.0 * (fit.log_el - sol0.log_el);
    if t < -1e-8 {
        return Err(Error::Numerical(format!(
            "ratio statistic {t:.3e} is negative; the fitted value does not maximize the profile"
        )));
    }
    Ok(t.max(0.0))
}

/// One-dimensional likelihood-ratio confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrInterval {
    pub lo: f64,
    pub hi: f64,
    /// Set when the statistic never crossed the critical value on that
    /// side within the bracket budget.
    pub lo_unbounded: bool,
    pub hi_unbounded: bool,
}

/// Inverted likelihood-ratio set: exact interval endpoints in one
/// dimension, an ellipsoidal summary (from the covariance plug-in) plus
/// the membership oracle [`lr_contains`] in higher dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSet {
    Interval(LrInterval),
    Ellipsoid {
        center: Vec<f64>,
        /// `sigma_hat / n`; the set is approximately
        /// `(theta - center)^T shape^{-1} (theta - center) <= radius`.
        shape: Vec<Vec<f64>>,
        radius: f64,
    },
}

/// Membership oracle for the likelihood-ratio confidence set.
pub fn lr_contains(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    fit: &ELFit,
    theta0: &DVector<f64>,
    critical_value: f64,
    controls: &SolverControls,
) -> Result<bool> {
    Ok(el_ratio_stat(dataset, model, aux, theta0, fit, controls)? <= critical_value)
}

/// Inverts the ratio test into a confidence set. In one dimension the
/// endpoints come from bisection on `T_n(theta) - t_alpha`, bracketed by
/// doubling a Wald-width step outward from the estimate.
pub fn lr_confidence_set(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    fit: &ELFit,
    sigma: &DMatrix<f64>,
    critical_value: f64,
    controls: &SolverControls,
) -> Result<LrSet> {
    let p = model.p();
    if p > 1 {
        return Ok(LrSet::Ellipsoid {
            center: fit.theta_hat.iter().cloned().collect(),
            shape: (0..p)
                .map(|i| (0..p).map(|j| sigma[(i, j)] / dataset.n() as f64).collect())
                .collect(),
            radius: critical_value,
        });
    }

    let theta_hat = fit.theta_hat[0];
    let wald_se = (sigma[(0, 0)].max(0.0) / dataset.n() as f64).sqrt();
    let scale = wald_se.max(1e-12 * (1.0 + theta_hat.abs()));
    let stat = |theta: f64| -> Result<f64> {
        el_ratio_stat(
            dataset,
            model,
            aux,
            &DVector::from_vec(vec![theta]),
            fit,
            controls,
        )
    };

    let solve_side = |dir: f64| -> Result<(f64, bool)> {
        let mut width = scale;
        let mut inside = theta_hat;
        for _ in 0..50 {
            let probe = theta_hat + dir * width;
            let t = stat(probe)?;
            if t > critical_value {
                // Bracketed: bisection between the last inside point and
                // the probe.
                let (mut lo, mut hi) = (inside, probe);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let tm = stat(mid)?;
                    if tm > critical_value {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if (hi - lo).abs() <= 1e-8 * scale && (tm - critical_value).abs() <= 1e-6 {
                        break;
                    }
                }
                return Ok((0.5 * (lo + hi), false));
            }
            inside = probe;
            width *= 2.0;
        }
        Ok((inside, true))
    };

    let (hi, hi_unbounded) = solve_side(1.0)?;
    let (lo, lo_unbounded) = solve_side(-1.0)?;
    Ok(LrSet::Interval(LrInterval {
        lo,
        hi,
        lo_unbounded,
        hi_unbounded,
    }))
}

/// Safety comparison against the supervised covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    /// Minimum eigenvalue of `sigma_supervised - sigma_h` (square scores).
    pub min_eig_gap: Option<f64>,
    /// Largest labeled fraction under which the over-identified form is
    /// certified no worse than supervised.
    pub gamma_threshold: Option<f64>,
    pub gamma_n: f64,
    pub satisfied: bool,
}

/// Certifies that the fitted covariance is no worse than the supervised
/// one. Square scores always satisfy the comparison up to rounding; for
/// over-identified scores the certificate checks the labeled fraction
/// against its admissible threshold.
pub fn safety_certificate(pm: &PluginMoments) -> Result<SafetyReport> {
    if pm.q() == pm.p() {
        let jinv = inverted_j(pm)?;
        let sup = symmetrize(&(&jinv * &pm.cov_g * jinv.transpose()));
        let gap = &sup - sigma_hat(pm)?;
        let min_eig = sym_min_eig(&gap);
        return Ok(SafetyReport {
            min_eig_gap: Some(min_eig),
            gamma_threshold: None,
            gamma_n: pm.gamma_n,
            satisfied: min_eig >= -1e-8,
        });
    }
    if pm.r() == 0 {
        return Ok(SafetyReport {
            min_eig_gap: None,
            gamma_threshold: Some(1.0),
            gamma_n: pm.gamma_n,
            satisfied: true,
        });
    }
    let (u_pinv, _) = psd_pinv(&pm.u_hat, PSD_REL_TOL);
    let (b, uj) = projected_information(pm);
    let b_inv = b
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("projected information is singular".into()))?;
    // Residual projection U^+ - U^+ J (J^T U^+ J)^{-1} J^T U^+.
    let pi_u = symmetrize(&(&u_pinv - &uj * b_inv * uj.transpose()));
    let ch_sqrt = psd_sqrt(&pm.cov_h, PSD_REL_TOL);
    let hg = pm.cov_gh.transpose();
    let core = symmetrize(&(&ch_sqrt * &hg * pi_u * hg.transpose() * &ch_sqrt));
    let lam_max = core
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let threshold = 1.0 / (1.0 + lam_max);
    Ok(SafetyReport {
        min_eig_gap: None,
        gamma_threshold: Some(threshold),
        gamma_n: pm.gamma_n,
        satisfied: pm.gamma_n <= threshold + 1e-12,
    })
}

/// Per-coordinate Wald interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Everything inference produces for one fit, serializable with stable
/// field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    /// Asymptotic covariance of the scaled estimator, row-major.
    pub sigma_hat: Vec<Vec<f64>>,
    pub lambda_hat: Vec<f64>,
    pub critical_value: f64,
    /// Ratio statistic at the tested point, when one was supplied.
    pub t_n: Option<f64>,
    pub wald: Vec<WaldInterval>,
    pub lr_interval: Option<LrSet>,
    pub safety: SafetyReport,
}

/// Builds the full report for a fitted estimate: covariance, calibrated
/// critical value, Wald and ratio intervals, and the safety certificate.
/// `theta0` optionally adds the ratio statistic at a hypothesized value.
pub fn inference_report(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    fit: &ELFit,
    alpha: f64,
    seed: u64,
    theta0: Option<&DVector<f64>>,
    controls: &SolverControls,
) -> Result<InferenceReport> {
    let pm = plugin_moments(dataset, model, aux, &fit.theta_hat)?;
    let sigma = sigma_hat(&pm)?;
    let lambda = lambda_hat(&pm)?;
    let lam: Vec<f64> = lambda.iter().cloned().collect();
    let critical_value = weighted_chisq_quantile(&lam, alpha, DEFAULT_MC_DRAWS, seed);
    let z = normal_quantile(1.0 - alpha / 2.0);
    let n = dataset.n() as f64;
    let wald = (0..model.p())
        .map(|k| {
            let se = (sigma[(k, k)].max(0.0) / n).sqrt();
            WaldInterval {
                estimate: fit.theta_hat[k],
                se,
                lo: fit.theta_hat[k] - z * se,
                hi: fit.theta_hat[k] + z * se,
            }
        })
        .collect();
    let t_n = match theta0 {
        Some(t0) => Some(el_ratio_stat(dataset, model, aux, t0, fit, controls)?),
        None => None,
    };
    let lr_interval = Some(lr_confidence_set(
        dataset,
        model,
        aux,
        fit,
        &sigma,
        critical_value,
        controls,
    )?);
    let safety = safety_certificate(&pm)?;
    Ok(InferenceReport {
        sigma_hat: (0..sigma.nrows())
            .map(|i| (0..sigma.ncols()).map(|j| sigma[(i, j)]).collect())
            .collect(),
        lambda_hat: lam,
        critical_value,
        t_n,
        wald,
        lr_interval,
        safety,
    })
}
