//! Replication engine: runs every requested method on shared per-
//! replication datasets and aggregates paired metrics.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::{dist_eval_grid, generate, true_theta};
use super::{ExperimentSpec, MethodId, Scenario};
use crate::auxiliary::{build_aux, indicator_targets, AuxMatrix, AuxSpec, LearnerSpec};
use crate::baselines;
use crate::dist::build_cdf;
use crate::el::SolverControls;
use crate::error::{Error, Result};
use crate::estimator::{fit, supervised_init, FitMode};
use crate::infer::{
    el_ratio_stat, lambda_hat, lr_confidence_set, plugin_moments, sigma_hat,
    weighted_chisq_quantile, LrSet, DEFAULT_MC_DRAWS,
};
use crate::model::{
    builtin_linreg_model, builtin_mean_model, builtin_overidentified_mean_model, MomentModel,
    PPIDataset, ProblemConfig,
};
use crate::numeric::{chi2_quantile, rep_rng};

/// One aggregate cell of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    /// Within-scenario coordinate ("-" for global rows, "tau=0.5" for a
    /// distribution query point).
    pub param: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub mc_se: f64,
    /// Replications contributing to this row.
    pub n_reps: usize,
    /// Replications excluded from this row.
    pub n_failures: usize,
}

/// Aggregated output of [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<MetricRow>,
    /// Diagnostics for excluded replications, ordered by replication.
    pub failures: Vec<String>,
}

/// Renders the rows as CSV, one line per metric cell.
pub fn result_csv(result: &ExperimentResult) -> String {
    let mut out = String::from("scenario,param,method,metric,value,mc_se,n_reps,n_failures\n");
    for row in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.scenario,
            row.param,
            row.method,
            row.metric,
            row.value,
            row.mc_se,
            row.n_reps,
            row.n_failures
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cover {
    Covered,
    MissLow,
    MissHigh,
    /// Outside a multivariate confidence region; no side to attribute.
    Missed,
}

/// Everything one method produces on one replication. Fields stay `None`
/// when the scenario or target dimension does not define them.
#[derive(Debug, Clone, Default)]
struct MethodOutcome {
    sq_err: Option<f64>,
    cover: Option<Cover>,
    ci_len: Option<f64>,
    rejected: Option<bool>,
    cdf_sq_err: Option<Vec<f64>>,
}

/// Seeds derived from `(spec.seed, rep)` so that every replication is
/// reproducible independently of worker scheduling.
struct RepSeeds {
    fold: u64,
    quantile: u64,
}

impl RepSeeds {
    fn new(seed: u64, rep: u64) -> Self {
        RepSeeds {
            fold: seed ^ rep.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            quantile: seed.wrapping_mul(1_000_003).wrapping_add(rep),
        }
    }
}

/// Runs the full replication loop and aggregates the results. Methods
/// within a replication share the dataset, so relative metrics are paired.
/// Failure diagnostics are collected per (replication, method); more than
/// 1% failures for any method aborts the run.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let per_rep: Vec<Vec<std::result::Result<MethodOutcome, String>>> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| run_rep(spec, rep as u64))
        .collect();
    aggregate(spec, &per_rep)
}

fn run_rep(spec: &ExperimentSpec, rep: u64) -> Vec<std::result::Result<MethodOutcome, String>> {
    let mut rng = rep_rng(spec.seed, rep);
    let data = match generate(spec.scenario, &spec.params, spec.n, spec.m, &mut rng) {
        Ok(d) => d,
        Err(e) => {
            let msg = format!("generate: {e}");
            return spec.methods.iter().map(|_| Err(msg.clone())).collect();
        }
    };
    let seeds = RepSeeds::new(spec.seed, rep);
    spec.methods
        .iter()
        .map(|&mid| run_method(spec, mid, &data, &seeds))
        .collect()
}

fn run_method(
    spec: &ExperimentSpec,
    mid: MethodId,
    data: &PPIDataset,
    seeds: &RepSeeds,
) -> std::result::Result<MethodOutcome, String> {
    let controls = SolverControls::default();
    if spec.scenario == Scenario::DistLearning {
        return dist_outcome(spec, mid, data, seeds, &controls);
    }
    let theta_star = true_theta(spec.scenario, &spec.params).expect("parametric scenario");
    let theta0 = &theta_star * spec.params.c_scale;
    match mid {
        MethodId::Supervised | MethodId::Ppi | MethodId::PpiPowerTuned => {
            // The rectified baselines need a square score; in the
            // over-identified scenario they compare against the sample
            // mean, so all three run on the plain mean model there.
            let model = match spec.scenario {
                Scenario::Linreg => builtin_linreg_model(spec.params.resolved_d(spec.scenario)),
                _ => builtin_mean_model(),
            };
            baseline_outcome(
                data,
                &model,
                mid,
                &theta_star,
                &theta0,
                spec.alpha,
                &controls,
            )
        }
        MethodId::EpiBasis | MethodId::EpiCf | MethodId::SupervisedEl => {
            let model = match spec.scenario {
                Scenario::Linreg => builtin_linreg_model(spec.params.resolved_d(spec.scenario)),
                Scenario::Overidentified => builtin_overidentified_mean_model(),
                _ => builtin_mean_model(),
            };
            let aux_spec = match (mid, spec.scenario) {
                (MethodId::SupervisedEl, _) => AuxSpec::None,
                (MethodId::EpiCf, _) => AuxSpec::Crossfit {
                    k: 5,
                    learner: LearnerSpec::default(),
                    targets: Default::default(),
                },
                (_, Scenario::Linreg) => AuxSpec::FixedBasis {
                    degree: 3,
                    include_interactions: true,
                },
                (_, Scenario::Overidentified) => AuxSpec::FixedBasis {
                    degree: 2,
                    include_interactions: true,
                },
                _ => AuxSpec::FixedBasis {
                    degree: 1,
                    include_interactions: true,
                },
            };
            epi_outcome(
                data,
                &model,
                &aux_spec,
                &theta_star,
                &theta0,
                spec.alpha,
                seeds,
                &controls,
            )
        }
    }
}

fn epi_outcome(
    data: &PPIDataset,
    model: &MomentModel,
    aux_spec: &AuxSpec,
    theta_star: &DVector<f64>,
    theta0: &DVector<f64>,
    alpha: f64,
    seeds: &RepSeeds,
    controls: &SolverControls,
) -> std::result::Result<MethodOutcome, String> {
    let mut config = ProblemConfig::new(model.clone(), aux_spec.clone());
    config.alpha = alpha;
    config.seed = seeds.fold;
    config.controls = controls.clone();
    let elfit = fit(&config, data).map_err(|e| format!("fit: {e}"))?;

    // Inference must see the block the estimate was actually computed
    // under: the rebuilt auxiliary when the calibrated route ran, the
    // empty block after a supervised fallback.
    let aux = match elfit.mode {
        FitMode::TwoStep | FitMode::FullProfile => {
            let pilot =
                supervised_init(data, model, controls).map_err(|e| format!("pilot: {e}"))?;
            build_aux(data, model, aux_spec, Some(&pilot), seeds.fold)
                .map_err(|e| format!("aux: {e}"))?
        }
        _ => AuxMatrix::empty(data.n()),
    };

    let pm =
        plugin_moments(data, model, &aux, &elfit.theta_hat).map_err(|e| format!("plugin: {e}"))?;
    let lambda = lambda_hat(&pm).map_err(|e| format!("lambda: {e}"))?;
    let crit = if aux.r() == 0 {
        // Exact chi-square calibration: every weight is one.
        chi2_quantile(1.0 - alpha, model.p() as f64)
    } else {
        let lam: Vec<f64> = lambda.iter().cloned().collect();
        weighted_chisq_quantile(&lam, alpha, DEFAULT_MC_DRAWS, seeds.quantile)
    };

    let sq_err = (&elfit.theta_hat - theta_star).norm_squared();
    let t0 = el_ratio_stat(data, model, &aux, theta0, &elfit, controls)
        .map_err(|e| format!("ratio stat: {e}"))?;
    let rejected = t0 > crit;

    let (cover, ci_len) = if model.p() == 1 {
        let sigma = sigma_hat(&pm).map_err(|e| format!("sigma: {e}"))?;
        match lr_confidence_set(data, model, &aux, &elfit, &sigma, crit, controls)
            .map_err(|e| format!("interval: {e}"))?
        {
            LrSet::Interval(iv) => {
                let t = theta_star[0];
                let cover = if !iv.lo_unbounded && t < iv.lo {
                    Cover::MissLow
                } else if !iv.hi_unbounded && t > iv.hi {
                    Cover::MissHigh
                } else {
                    Cover::Covered
                };
                let len = if iv.lo_unbounded || iv.hi_unbounded {
                    None
                } else {
                    Some(iv.hi - iv.lo)
                };
                (Some(cover), len)
            }
            LrSet::Ellipsoid { .. } => (None, None),
        }
    } else {
        // Region membership through the ratio test itself.
        let t_star = if theta0 == theta_star {
            t0
        } else {
            el_ratio_stat(data, model, &aux, theta_star, &elfit, controls)
                .map_err(|e| format!("ratio stat: {e}"))?
        };
        let cover = if t_star <= crit {
            Cover::Covered
        } else {
            Cover::Missed
        };
        (Some(cover), None)
    };

    Ok(MethodOutcome {
        sq_err: Some(sq_err),
        cover,
        ci_len,
        rejected: Some(rejected),
        cdf_sq_err: None,
    })
}

fn baseline_outcome(
    data: &PPIDataset,
    model: &MomentModel,
    mid: MethodId,
    theta_star: &DVector<f64>,
    theta0: &DVector<f64>,
    alpha: f64,
    controls: &SolverControls,
) -> std::result::Result<MethodOutcome, String> {
    let bfit = match mid {
        MethodId::Supervised => baselines::fit_supervised(data, model, alpha, controls),
        MethodId::Ppi => baselines::fit_ppi(data, model, alpha, controls),
        MethodId::PpiPowerTuned => baselines::fit_ppi_power_tuned(data, model, alpha, controls),
        _ => unreachable!("not a baseline method"),
    }
    .map_err(|e| format!("baseline: {e}"))?;

    let p = model.p();
    let theta_hat = DVector::from_vec(bfit.theta_hat.clone());
    let sq_err = (&theta_hat - theta_star).norm_squared();

    if p == 1 {
        let iv = &bfit.wald_ci[0];
        let t = theta_star[0];
        let cover = if t < iv.lo {
            Cover::MissLow
        } else if t > iv.hi {
            Cover::MissHigh
        } else {
            Cover::Covered
        };
        let rejected = theta0[0] < iv.lo || theta0[0] > iv.hi;
        return Ok(MethodOutcome {
            sq_err: Some(sq_err),
            cover: Some(cover),
            ci_len: Some(iv.hi - iv.lo),
            rejected: Some(rejected),
            cdf_sq_err: None,
        });
    }

    // Multivariate target: Wald quadratic-form test against the plug-in
    // covariance.
    let mut sigma = nalgebra::DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            sigma[(i, j)] = bfit.sigma_hat[i][j];
        }
    }
    let lu = sigma.lu();
    let n = data.n() as f64;
    let stat = |point: &DVector<f64>| -> std::result::Result<f64, String> {
        let d = &theta_hat - point;
        let sol = lu
            .solve(&d)
            .ok_or_else(|| "singular plug-in covariance".to_string())?;
        Ok(n * d.dot(&sol))
    };
    let crit = chi2_quantile(1.0 - alpha, p as f64);
    let t_star = stat(theta_star)?;
    let t0 = if theta0 == theta_star {
        t_star
    } else {
        stat(theta0)?
    };
    Ok(MethodOutcome {
        sq_err: Some(sq_err),
        cover: Some(if t_star <= crit {
            Cover::Covered
        } else {
            Cover::Missed
        }),
        ci_len: None,
        rejected: Some(t0 > crit),
        cdf_sq_err: None,
    })
}

/// Sorted-order deciles of the pooled predictions, the default indicator
/// grid for calibrated distribution learning.
fn pooled_decile_grid(data: &PPIDataset) -> Vec<f64> {
    let mut pooled: Vec<f64> = data
        .labeled_ytilde
        .iter()
        .chain(data.unlabeled_ytilde.iter())
        .cloned()
        .collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let len = pooled.len();
    (1..=9)
        .map(|k| pooled[((k * len) / 10).saturating_sub(1).min(len - 1)])
        .collect()
}

fn dist_outcome(
    spec: &ExperimentSpec,
    mid: MethodId,
    data: &PPIDataset,
    seeds: &RepSeeds,
    controls: &SolverControls,
) -> std::result::Result<MethodOutcome, String> {
    let aux = match mid {
        MethodId::Supervised => AuxMatrix::empty(data.n()),
        MethodId::EpiBasis => build_aux(
            data,
            &builtin_mean_model(),
            &AuxSpec::FixedBasis {
                degree: 2,
                include_interactions: false,
            },
            None,
            seeds.fold,
        )
        .map_err(|e| format!("aux: {e}"))?,
        MethodId::EpiCf => {
            let grid = pooled_decile_grid(data);
            indicator_targets(data, &grid, &LearnerSpec::default(), 5, seeds.fold)
                .map_err(|e| format!("aux: {e}"))?
        }
        _ => unreachable!("excluded by validation"),
    };
    let cdf = build_cdf(data, &aux, controls).map_err(|e| format!("cdf: {e}"))?;
    let (ys, fs) = dist_eval_grid(spec.params.sigma);
    let sq: Vec<f64> = ys
        .iter()
        .zip(fs.iter())
        .map(|(&y, &f)| {
            let diff = cdf.cdf_at(y, None) - f;
            diff * diff
        })
        .collect();
    Ok(MethodOutcome {
        sq_err: None,
        cover: None,
        ci_len: None,
        rejected: None,
        cdf_sq_err: Some(sq),
    })
}

fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let r = vals.len();
    if r == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / r as f64;
    if r < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1) as f64;
    (mean, (var / r as f64).sqrt())
}

fn proportion_and_se(hits: usize, r: usize) -> (f64, f64) {
    if r == 0 {
        return (f64::NAN, f64::NAN);
    }
    let p = hits as f64 / r as f64;
    (p, (p * (1.0 - p) / r as f64).sqrt())
}

/// Ratio of paired means `sum(a) / sum(b)` with a delta-method standard
/// error. Exactly `(1, 0)` when the sequences coincide.
fn paired_ratio(a: &[f64], b: &[f64]) -> Option<(f64, f64)> {
    let r = a.len();
    if r == 0 || b.iter().sum::<f64>() <= 0.0 {
        return None;
    }
    let sb = b.iter().sum::<f64>();
    let ratio = a.iter().sum::<f64>() / sb;
    if r < 2 {
        return Some((ratio, 0.0));
    }
    let resid: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - ratio * y).collect();
    let mr = resid.iter().sum::<f64>() / r as f64;
    let var = resid.iter().map(|v| (v - mr) * (v - mr)).sum::<f64>() / (r - 1) as f64;
    let se = (var / r as f64).sqrt() / (sb / r as f64);
    Some((ratio, se))
}

fn aggregate(
    spec: &ExperimentSpec,
    per_rep: &[Vec<std::result::Result<MethodOutcome, String>>],
) -> Result<ExperimentResult> {
    let reps = spec.replications;
    let mut failures = Vec::new();
    for (rep, row) in per_rep.iter().enumerate() {
        for (mi, res) in row.iter().enumerate() {
            if let Err(msg) = res {
                failures.push(format!("rep {rep} {}: {msg}", spec.methods[mi].name()));
            }
        }
    }
    for (mi, method) in spec.methods.iter().enumerate() {
        let fails = per_rep.iter().filter(|row| row[mi].is_err()).count();
        if fails * 100 > reps {
            return Err(Error::Numerical(format!(
                "method {} failed {fails} of {reps} replications",
                method.name()
            )));
        }
    }

    let scen = spec.scenario.name();
    let sup_idx = spec
        .methods
        .iter()
        .position(|m| *m == MethodId::Supervised);
    let scalar_target = match spec.scenario {
        Scenario::MeanInference | Scenario::Overidentified => true,
        Scenario::Linreg => spec.params.resolved_d(spec.scenario) == 1,
        Scenario::DistLearning => false,
    };

    let mut rows = Vec::new();
    let mut push = |param: &str, method: MethodId, metric: &str, value: f64, se: f64, r: usize| {
        rows.push(MetricRow {
            scenario: scen.to_string(),
            param: param.to_string(),
            method: method.name().to_string(),
            metric: metric.to_string(),
            value,
            mc_se: se,
            n_reps: r,
            n_failures: reps - r,
        });
    };

    let ok = |mi: usize, rep: usize| -> Option<&MethodOutcome> { per_rep[rep][mi].as_ref().ok() };

    for (mi, &method) in spec.methods.iter().enumerate() {
        if spec.scenario == Scenario::DistLearning {
            // Per-query-point mean squared error, globally and per decile.
            let per_rep_vals: Vec<&Vec<f64>> = (0..reps)
                .filter_map(|rep| ok(mi, rep).and_then(|o| o.cdf_sq_err.as_ref()))
                .collect();
            let global: Vec<f64> = per_rep_vals
                .iter()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect();
            let (val, se) = mean_and_se(&global);
            push("-", method, "cdf_mse", val, se, global.len());
            let k_points = per_rep_vals.first().map_or(0, |v| v.len());
            for k in 0..k_points {
                let vals: Vec<f64> = per_rep_vals.iter().map(|v| v[k]).collect();
                let (val, se) = mean_and_se(&vals);
                let tau = format!("tau={:.1}", (k + 1) as f64 / 10.0);
                push(&tau, method, "cdf_mse", val, se, vals.len());
            }
            if let Some(si) = sup_idx {
                let common: Vec<usize> = (0..reps)
                    .filter(|&rep| {
                        ok(mi, rep).map_or(false, |o| o.cdf_sq_err.is_some())
                            && ok(si, rep).map_or(false, |o| o.cdf_sq_err.is_some())
                    })
                    .collect();
                let grab = |idx: usize, f: &dyn Fn(&Vec<f64>) -> f64| -> Vec<f64> {
                    common
                        .iter()
                        .map(|&rep| f(ok(idx, rep).unwrap().cdf_sq_err.as_ref().unwrap()))
                        .collect()
                };
                let avg = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
                if let Some((val, se)) = paired_ratio(&grab(mi, &avg), &grab(si, &avg)) {
                    push("-", method, "cdf_mse_ratio", val, se, common.len());
                }
                for k in 0..k_points {
                    let at = move |v: &Vec<f64>| v[k];
                    if let Some((val, se)) = paired_ratio(&grab(mi, &at), &grab(si, &at)) {
                        let tau = format!("tau={:.1}", (k + 1) as f64 / 10.0);
                        push(&tau, method, "cdf_mse_ratio", val, se, common.len());
                    }
                }
            }
            continue;
        }

        let sq: Vec<f64> = (0..reps)
            .filter_map(|rep| ok(mi, rep).and_then(|o| o.sq_err))
            .collect();
        let (val, se) = mean_and_se(&sq);
        push("-", method, "mse", val, se, sq.len());

        if let Some(si) = sup_idx {
            let common: Vec<usize> = (0..reps)
                .filter(|&rep| {
                    ok(mi, rep).map_or(false, |o| o.sq_err.is_some())
                        && ok(si, rep).map_or(false, |o| o.sq_err.is_some())
                })
                .collect();
            let a: Vec<f64> = common
                .iter()
                .map(|&rep| ok(mi, rep).unwrap().sq_err.unwrap())
                .collect();
            let b: Vec<f64> = common
                .iter()
                .map(|&rep| ok(si, rep).unwrap().sq_err.unwrap())
                .collect();
            if let Some((val, se)) = paired_ratio(&a, &b) {
                push("-", method, "rel_mse", val, se, common.len());
            }
        }

        let covers: Vec<Cover> = (0..reps)
            .filter_map(|rep| ok(mi, rep).and_then(|o| o.cover))
            .collect();
        if !covers.is_empty() {
            let r = covers.len();
            let hit = covers.iter().filter(|c| **c == Cover::Covered).count();
            let (val, se) = proportion_and_se(hit, r);
            push("-", method, "coverage", val, se, r);
            if scalar_target {
                let low = covers.iter().filter(|c| **c == Cover::MissLow).count();
                let high = covers.iter().filter(|c| **c == Cover::MissHigh).count();
                let (val, se) = proportion_and_se(low, r);
                push("-", method, "miscoverage_lower", val, se, r);
                let (val, se) = proportion_and_se(high, r);
                push("-", method, "miscoverage_upper", val, se, r);
            }
        }

        if scalar_target {
            let lens: Vec<f64> = (0..reps)
                .filter_map(|rep| ok(mi, rep).and_then(|o| o.ci_len))
                .collect();
            if !lens.is_empty() {
                let (val, se) = mean_and_se(&lens);
                push("-", method, "ci_length", val, se, lens.len());
            }
            if let Some(si) = sup_idx {
                let common: Vec<usize> = (0..reps)
                    .filter(|&rep| {
                        ok(mi, rep).map_or(false, |o| o.ci_len.is_some())
                            && ok(si, rep).map_or(false, |o| o.ci_len.is_some())
                    })
                    .collect();
                let a: Vec<f64> = common
                    .iter()
                    .map(|&rep| ok(mi, rep).unwrap().ci_len.unwrap())
                    .collect();
                let b: Vec<f64> = common
                    .iter()
                    .map(|&rep| ok(si, rep).unwrap().ci_len.unwrap())
                    .collect();
                if let Some((val, se)) = paired_ratio(&a, &b) {
                    push("-", method, "ci_length_ratio", val, se, common.len());
                }
            }
        }

        let rejections: Vec<bool> = (0..reps)
            .filter_map(|rep| ok(mi, rep).and_then(|o| o.rejected))
            .collect();
        if !rejections.is_empty() {
            let r = rejections.len();
            let hit = rejections.iter().filter(|x| **x).count();
            let (val, se) = proportion_and_se(hit, r);
            push("-", method, "rejection_rate", val, se, r);
        }
    }

    Ok(ExperimentResult { rows, failures })
}
