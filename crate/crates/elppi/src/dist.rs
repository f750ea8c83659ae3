//! Calibrated distribution learning.
//!
//! The auxiliary-only inner solve produces weights that tilt the labeled
//! empirical measure toward the pooled auxiliary means. Accumulating those
//! weights over indicator events gives a calibrated distribution function
//! F-hat(y, x) = sum_i w_i I(Y_i <= y, X_i <= x) whose pointwise variance
//! never exceeds the supervised binomial variance. This module builds the
//! calibrated CDF, inverts it into quantiles, evaluates the pointwise
//! variance plug-in (with an optional over-identified score block), and
//! inverts the pointwise band into quantile confidence intervals.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::auxiliary::AuxMatrix;
use crate::el::{solve_inner, ConstraintMatrix, SolverControls};
use crate::error::{Error, Result};
use crate::model::{MomentModel, PPIDataset};
use crate::numeric::{
    covariance, cross_covariance, normal_quantile, psd_pinv, symmetrize, PSD_REL_TOL,
};

/// Tolerance at which an estimated probability counts as degenerate.
const DEGENERATE_PROB_TOL: f64 = 1e-12;

/// Step-function distribution estimate from calibrated weights.
///
/// Immutable after construction; all queries are read-only.
#[derive(Debug, Clone)]
pub struct CalibratedCDF {
    /// Labeled responses in ascending order.
    support_y: Vec<f64>,
    /// Weights aligned with `support_y`.
    weights: Vec<f64>,
    /// Running weight sums over `support_y`.
    cumulative: Vec<f64>,
    /// Original-order labeled rows, kept for joint rectangle queries.
    rows_y: DVector<f64>,
    rows_x: DMatrix<f64>,
    row_weights: Vec<f64>,
    /// Set when infeasible constraints forced the uniform-weight fallback.
    pub ecdf_fallback: bool,
    pub warnings: Vec<String>,
}

impl CalibratedCDF {
    pub fn support(&self) -> &[f64] {
        &self.support_y
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Right-continuous evaluation; `x` restricts to the rectangle
    /// `X <= x` componentwise, omitted means the marginal in `y`.
    pub fn cdf_at(&self, y: f64, x: Option<&DVector<f64>>) -> f64 {
        match x {
            None => {
                let k = self.support_y.partition_point(|&v| v <= y);
                if k == 0 {
                    0.0
                } else {
                    self.cumulative[k - 1]
                }
            }
            Some(rect) => {
                let mut acc = 0.0;
                for i in 0..self.rows_y.len() {
                    if self.rows_y[i] <= y
                        && (0..rect.len()).all(|j| self.rows_x[(i, j)] <= rect[j])
                    {
                        acc += self.row_weights[i];
                    }
                }
                acc
            }
        }
    }

    /// Generalized inverse `inf { y : F(y) >= tau }`; always an observed
    /// response value.
    pub fn quantile(&self, tau: f64) -> f64 {
        assert!(tau > 0.0 && tau < 1.0, "tau must be in (0,1)");
        let idx = self.cumulative.partition_point(|&c| c < tau);
        self.support_y[idx.min(self.support_y.len() - 1)]
    }

    /// Two-column CSV of the step function for plotting.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "y,cdf").map_err(Error::Io)?;
        for (y, c) in self.support_y.iter().zip(&self.cumulative) {
            writeln!(out, "{y},{c}").map_err(Error::Io)?;
        }
        Ok(())
    }
}

fn uniform_cdf(dataset: &PPIDataset, warnings: Vec<String>, fallback: bool) -> CalibratedCDF {
    let n = dataset.n();
    let w = vec![1.0 / n as f64; n];
    assemble(dataset, w, warnings, fallback)
}

fn assemble(
    dataset: &PPIDataset,
    row_weights: Vec<f64>,
    warnings: Vec<String>,
    ecdf_fallback: bool,
) -> CalibratedCDF {
    let n = dataset.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        dataset.labeled_y[a]
            .partial_cmp(&dataset.labeled_y[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let support_y: Vec<f64> = order.iter().map(|&i| dataset.labeled_y[i]).collect();
    let weights: Vec<f64> = order.iter().map(|&i| row_weights[i]).collect();
    let uniform = ecdf_fallback || weights.iter().all(|&w| (w - weights[0]).abs() == 0.0);
    let cumulative: Vec<f64> = if uniform {
        // Exact ECDF levels, avoiding accumulation error.
        (1..=n).map(|k| k as f64 / n as f64).collect()
    } else {
        weights
            .iter()
            .scan(0.0, |acc, &w| {
                *acc += w;
                Some(*acc)
            })
            .collect()
    };
    CalibratedCDF {
        support_y,
        weights,
        cumulative,
        rows_y: dataset.labeled_y.clone(),
        rows_x: dataset.labeled_x.clone(),
        row_weights,
        ecdf_fallback,
        warnings,
    }
}

/// Builds the calibrated CDF from the auxiliary-only inner solve. No
/// auxiliary columns, or infeasible ones, give the unweighted empirical
/// distribution (the latter with a warning).
pub fn build_cdf(
    dataset: &PPIDataset,
    aux: &AuxMatrix,
    controls: &SolverControls,
) -> Result<CalibratedCDF> {
    dataset.validate()?;
    if aux.r() == 0 {
        return Ok(uniform_cdf(dataset, aux.warnings.clone(), false));
    }
    let cm = ConstraintMatrix::new(aux.hc.clone(), 0)?;
    match solve_inner(&cm, controls) {
        Ok(sol) => {
            let w: Vec<f64> = sol.weights.iter().cloned().collect();
            debug_assert!(w.iter().all(|&v| v > 0.0));
            Ok(assemble(dataset, w, aux.warnings.clone(), false))
        }
        Err(Error::Infeasible(_)) => {
            let mut warnings = aux.warnings.clone();
            warnings.push(
                "auxiliary constraints infeasible; falling back to the unweighted empirical distribution"
                    .into(),
            );
            Ok(uniform_cdf(dataset, warnings, true))
        }
        Err(other) => Err(other),
    }
}

/// Precomputed moment blocks shared by every pointwise variance query.
#[derive(Debug, Clone)]
pub struct VarianceContext {
    hc_labeled: DMatrix<f64>,
    cov_h_pinv: DMatrix<f64>,
    gamma_n: f64,
    n: usize,
    score: Option<ScoreBlock>,
}

#[derive(Debug, Clone)]
struct ScoreBlock {
    /// Labeled score rows at the fitted estimate, `n x q`.
    g: DMatrix<f64>,
    /// Score-auxiliary cross covariance, `q x r`.
    egh: DMatrix<f64>,
    /// Residual projection `U^+ - U^+ J (J' U^+ J)^{-1} J' U^+`.
    pi_u: DMatrix<f64>,
}

impl VarianceContext {
    /// Builds the context. Supplying an over-identified score model (with
    /// its fitted estimate) switches the variance to the general form,
    /// whose extra projection terms vanish when the Jacobian is square.
    pub fn new(
        dataset: &PPIDataset,
        model: Option<&MomentModel>,
        theta_hat: Option<&DVector<f64>>,
        aux: &AuxMatrix,
    ) -> Result<Self> {
        let n = dataset.n();
        let hc_labeled = aux.hc.rows(0, n).into_owned();
        let cov_h_pinv = if aux.r() == 0 {
            DMatrix::zeros(0, 0)
        } else {
            psd_pinv(&covariance(&hc_labeled), PSD_REL_TOL).0
        };
        let score = match model {
            None => None,
            Some(model) => {
                let theta = theta_hat.ok_or_else(|| {
                    Error::InvalidArgument(
                        "a fitted estimate is required together with the score model".into(),
                    )
                })?;
                let g = model.g_matrix(theta, &dataset.labeled_y, &dataset.labeled_x);
                let j = model.jacobian_mean(theta, &dataset.labeled_y, &dataset.labeled_x);
                let egh = if aux.r() == 0 {
                    DMatrix::zeros(model.q(), 0)
                } else {
                    cross_covariance(&g, &hc_labeled)
                };
                let cov_g = covariance(&g);
                let u = symmetrize(&(&cov_g - &egh * &cov_h_pinv * egh.transpose()));
                let (u_pinv, _) = psd_pinv(&u, PSD_REL_TOL);
                let uj = &u_pinv * &j;
                let b = symmetrize(&(j.transpose() * &uj));
                let b_inv = b.lu().try_inverse().ok_or_else(|| {
                    Error::Numerical("projected information is singular".into())
                })?;
                let pi_u = symmetrize(&(&u_pinv - &uj * b_inv * uj.transpose()));
                Some(ScoreBlock { g, egh, pi_u })
            }
        };
        Ok(Self {
            hc_labeled,
            cov_h_pinv,
            gamma_n: dataset.gamma_n(),
            n,
            score,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn indicator(&self, dataset: &PPIDataset, y: f64, x: Option<&DVector<f64>>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, 1, |i, _| {
            let inside = dataset.labeled_y[i] <= y
                && x.map_or(true, |rect| {
                    (0..rect.len()).all(|j| dataset.labeled_x[(i, j)] <= rect[j])
                });
            if inside {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Pointwise asymptotic variance of `sqrt(n) {F-hat - F}` at the query
    /// point, plugged in at `f_hat`. Returns the variance and a degeneracy
    /// flag; a degenerate probability estimate collapses the variance.
    pub fn pointwise_variance(
        &self,
        dataset: &PPIDataset,
        f_hat: f64,
        y: f64,
        x: Option<&DVector<f64>>,
    ) -> (f64, bool) {
        if f_hat <= DEGENERATE_PROB_TOL || f_hat >= 1.0 - DEGENERATE_PROB_TOL {
            return (0.0, true);
        }
        let base = f_hat * (1.0 - f_hat);
        let ind = self.indicator(dataset, y, x);
        let r = self.hc_labeled.ncols();
        let rho_h = if r == 0 {
            DVector::zeros(0)
        } else {
            DVector::from_iterator(
                r,
                cross_covariance(&self.hc_labeled, &ind).column(0).iter().cloned(),
            )
        };
        let sigma2 = match &self.score {
            None => {
                if r == 0 {
                    base
                } else {
                    let adj = (&self.cov_h_pinv * &rho_h).dot(&rho_h);
                    base - (1.0 - self.gamma_n) * adj
                }
            }
            Some(sb) => {
                // rho_gI is an uncentered moment: the score has mean zero
                // at the target.
                let q = sb.g.ncols();
                let rho_g = DVector::from_fn(q, |k, _| {
                    (0..self.n).map(|i| sb.g[(i, k)] * ind[(i, 0)]).sum::<f64>() / self.n as f64
                });
                let c_rho = &self.cov_h_pinv * &rho_h;
                let a = &rho_g - &sb.egh * &c_rho;
                let b = sb.egh.transpose() * &sb.pi_u * &a - &rho_h;
                base - rho_h.dot(&c_rho) - (&sb.pi_u * &a).dot(&a)
                    + self.gamma_n * (&self.cov_h_pinv * &b).dot(&b)
            }
        };
        (sigma2.max(0.0), false)
    }
}

/// Pointwise Wald band for the distribution function at one query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfBand {
    pub f_hat: f64,
    pub sigma2: f64,
    pub lo: f64,
    pub hi: f64,
    pub degenerate: bool,
}

/// Evaluates the calibrated estimate with its Wald interval at `(y, x)`.
pub fn cdf_band(
    cdf: &CalibratedCDF,
    ctx: &VarianceContext,
    dataset: &PPIDataset,
    y: f64,
    x: Option<&DVector<f64>>,
    alpha: f64,
) -> CdfBand {
    let f_hat = cdf.cdf_at(y, x);
    let (sigma2, degenerate) = ctx.pointwise_variance(dataset, f_hat, y, x);
    let z = normal_quantile(1.0 - alpha / 2.0);
    let half = z * (sigma2 / ctx.n as f64).sqrt();
    CdfBand {
        f_hat,
        sigma2,
        lo: (f_hat - half).max(0.0),
        hi: (f_hat + half).min(1.0),
        degenerate,
    }
}

/// Quantile confidence interval from the inverted pointwise band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCI {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    /// Set when no support point satisfied the band inequality and the
    /// interval fell back to the full observed range.
    pub fallback: bool,
}

/// Inverts the pointwise CDF band into a confidence interval for the
/// `tau`-quantile: the support points where `|F-hat(y) - tau|` is within
/// its Wald margin. The interval follows any asymmetry of the band.
pub fn quantile_ci(
    cdf: &CalibratedCDF,
    ctx: &VarianceContext,
    dataset: &PPIDataset,
    tau: f64,
    alpha: f64,
) -> QuantileCI {
    assert!(tau > 0.0 && tau < 1.0, "tau must be in (0,1)");
    let z = normal_quantile(1.0 - alpha / 2.0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&y, &f) in cdf.support().iter().zip(cdf.cumulative()) {
        let (sigma2, _) = ctx.pointwise_variance(dataset, f, y, None);
        let margin = z * (sigma2 / ctx.n as f64).sqrt();
        if (f - tau).abs() <= margin {
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    let estimate = cdf.quantile(tau);
    if lo.is_finite() {
        QuantileCI {
            estimate,
            lo,
            hi,
            fallback: false,
        }
    } else {
        QuantileCI {
            estimate,
            lo: cdf.support()[0],
            hi: *cdf.support().last().unwrap(),
            fallback: true,
        }
    }
}
