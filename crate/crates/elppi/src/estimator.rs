//! Point estimation.
//!
//! Just-identified scores use the two-step route: solve the inner problem
//! on the auxiliary block alone, then find the root of the reweighted
//! score. That root maximizes the profile exactly, because at it the
//! stacked problem is solved by a zero multiplier on the score block.
//! Over-identified scores need the full profile: quasi-Newton on the
//! profile log empirical likelihood, with the inner solve nested per
//! outer iterate and the gradient available in closed form from the
//! inner multipliers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::auxiliary::{build_aux, AuxMatrix};
use crate::el::{solve_inner, solve_inner_warm, ConstraintMatrix, ELInnerSolution, SolverControls};
use crate::error::{Error, Result};
use crate::model::{MomentModel, PPIDataset, ProblemConfig};
use crate::numeric::solve_spd_damped;

/// Which estimation route produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    TwoStep,
    FullProfile,
    SupervisedEl,
    SupervisedPlain,
}

/// One outer-iteration record. For the profile route `objective` is the
/// log empirical likelihood and `grad_norm` the profile gradient norm;
/// for the two-step route they are the (fixed) step-1 value and the
/// weighted score residual norm.
#[derive(Debug, Clone)]
pub struct OuterStep {
    pub theta: DVector<f64>,
    pub objective: f64,
    pub grad_norm: f64,
}

/// A fitted estimate with its empirical-likelihood state.
#[derive(Debug, Clone)]
pub struct ELFit {
    pub theta_hat: DVector<f64>,
    /// Probability weights on the labeled rows at `theta_hat`.
    pub weights: DVector<f64>,
    /// Stacked multipliers: `q` score entries then `r` auxiliary entries.
    /// The score block is identically zero on the two-step route.
    pub multipliers: DVector<f64>,
    /// Profile log empirical likelihood at `theta_hat`.
    pub log_el: f64,
    pub path: Vec<OuterStep>,
    pub mode: FitMode,
    pub converged: bool,
    /// Fallbacks taken and diagnostic flags.
    pub notes: Vec<String>,
}

/// Stacks the score block at `theta` with the centered auxiliary block.
pub fn stacked_constraints(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    theta: &DVector<f64>,
) -> Result<ConstraintMatrix> {
    let n = dataset.n();
    let g = model.g_matrix(theta, &dataset.labeled_y, &dataset.labeled_x);
    let r = aux.r();
    let mut z = DMatrix::zeros(n, model.q() + r);
    for i in 0..n {
        for j in 0..model.q() {
            z[(i, j)] = g[(i, j)];
        }
        for j in 0..r {
            z[(i, model.q() + j)] = aux.hc[(i, j)];
        }
    }
    ConstraintMatrix::new(z, model.q())
}

/// Damped Newton root of the reweighted score equation
/// `sum_i w_i g_theta(y_i, x_i) = 0` for a square system (`q = p`),
/// projected into the model domain.
fn weighted_score_root(
    dataset: &PPIDataset,
    model: &MomentModel,
    weights: &DVector<f64>,
    theta_init: &DVector<f64>,
    controls: &SolverControls,
    path: &mut Vec<OuterStep>,
    step1_log_el: f64,
) -> Result<DVector<f64>> {
    assert_eq!(model.q(), model.p(), "weighted_score_root needs a square system");
    let n = dataset.n();
    let residual = |theta: &DVector<f64>| -> DVector<f64> {
        let g = model.g_matrix(theta, &dataset.labeled_y, &dataset.labeled_x);
        let mut acc = DVector::zeros(model.q());
        for i in 0..n {
            for j in 0..model.q() {
                acc[j] += weights[i] * g[(i, j)];
            }
        }
        acc
    };
    let mut theta = model.project(theta_init);
    let mut res = residual(&theta);
    let scale = res.norm().max(1.0);
    let mut xrow = DVector::zeros(dataset.d());
    for _ in 0..controls.max_outer_iters {
        let rn = res.norm();
        path.push(OuterStep {
            theta: theta.clone(),
            objective: step1_log_el,
            grad_norm: rn,
        });
        if rn <= controls.outer_tol * scale {
            return Ok(theta);
        }
        // Weighted Jacobian of the score mean.
        let mut jw = DMatrix::zeros(model.q(), model.p());
        for i in 0..n {
            for j in 0..dataset.d() {
                xrow[j] = dataset.labeled_x[(i, j)];
            }
            jw += model.eval_jacobian(&theta, dataset.labeled_y[i], &xrow) * weights[i];
        }
        let lu = jw.clone().lu();
        let delta = match lu.solve(&res) {
            Some(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => {
                // Singular weighted Jacobian: retreat to a damped
                // least-squares step.
                let jtj = jw.transpose() * &jw;
                let rhs = jw.transpose() * &res;
                solve_spd_damped(&jtj, &rhs)?
            }
        };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = model.project(&(&theta - &delta * step));
            let tr = residual(&trial);
            if tr.norm() <= (1.0 - 1e-4 * step) * rn {
                theta = trial;
                res = tr;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence(format!(
                "weighted score stalled at residual {rn:.3e}"
            )));
        }
    }
    Err(Error::NoConvergence(format!(
        "weighted score root: {} iterations exhausted at residual {:.3e}",
        controls.max_outer_iters,
        res.norm()
    )))
}

/// Supervised initializer: the uniform-weight root of the score when the
/// system is square, and of its leading `p` components otherwise.
pub fn supervised_init(
    dataset: &PPIDataset,
    model: &MomentModel,
    controls: &SolverControls,
) -> Result<DVector<f64>> {
    let uniform = DVector::from_element(dataset.n(), 1.0 / dataset.n() as f64);
    let start = model.project(&DVector::zeros(model.p()));
    if model.q() == model.p() {
        let mut path = Vec::new();
        return weighted_score_root(dataset, model, &uniform, &start, controls, &mut path, f64::NAN);
    }
    let head = truncated_model(model);
    let mut path = Vec::new();
    weighted_score_root(dataset, &head, &uniform, &start, controls, &mut path, f64::NAN)
}

/// The square sub-model keeping only the first `p` score components.
fn truncated_model(model: &MomentModel) -> MomentModel {
    let inner = model.clone();
    let p = model.p();
    MomentModel::new(
        "leading-block",
        p,
        p,
        std::sync::Arc::new(move |theta: &DVector<f64>, y: f64, x: &DVector<f64>| {
            inner.eval_g(theta, y, x).rows(0, p).into_owned()
        }),
        None,
        model.domain().map(|d| d.to_vec()),
    )
    .expect("truncated model dimensions are valid")
}

/// Two-step estimate for just-identified scores: auxiliary-only inner
/// solve, then the reweighted score root. With an empty auxiliary block
/// this reduces to the supervised estimator under uniform weights.
pub fn fit_two_step(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    controls: &SolverControls,
) -> Result<ELFit> {
    if model.q() != model.p() {
        return Err(Error::InvalidArgument(
            "two-step route needs a just-identified score (q = p)".into(),
        ));
    }
    let n = dataset.n();
    let inner = if aux.r() == 0 {
        ELInnerSolution {
            multipliers: DVector::zeros(0),
            weights: DVector::from_element(n, 1.0 / n as f64),
            log_el: -(n as f64) * (n as f64).ln(),
            converged: true,
            newton_iters: 0,
            dropped_columns: Vec::new(),
        }
    } else {
        let cm = ConstraintMatrix::new(aux.hc.clone(), 0)?;
        solve_inner(&cm, controls).map_err(|e| match e {
            Error::Infeasible(msg) => Error::Infeasible(format!(
                "auxiliary constraints infeasible ({msg}); fall back to the supervised fit"
            )),
            other => other,
        })?
    };

    let init = supervised_init(dataset, model, controls)?;
    let mut path = Vec::new();
    let theta_hat = weighted_score_root(
        dataset,
        model,
        &inner.weights,
        &init,
        controls,
        &mut path,
        inner.log_el,
    )?;

    let mut multipliers = DVector::zeros(model.q() + aux.r());
    for j in 0..aux.r() {
        multipliers[model.q() + j] = inner.multipliers[j];
    }
    Ok(ELFit {
        theta_hat,
        weights: inner.weights.clone(),
        multipliers,
        log_el: inner.log_el,
        path,
        mode: FitMode::TwoStep,
        converged: inner.converged,
        notes: Vec::new(),
    })
}

/// Inner solve at `theta` plus the profile gradient. At the inner optimum
/// the multiplier path drops out, leaving
/// `grad l(theta) = -n * sum_i w_i J_i(theta)^T t1`
/// with `t1` the score-block multipliers.
fn profile_eval(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    theta: &DVector<f64>,
    warm: Option<&DVector<f64>>,
    controls: &SolverControls,
) -> Result<(ELInnerSolution, DVector<f64>)> {
    let cm = stacked_constraints(dataset, model, aux, theta)?;
    let sol = solve_inner_warm(&cm, warm, controls)?;
    let n = dataset.n();
    let t1 = sol.multipliers.rows(0, model.q()).into_owned();
    let mut grad = DVector::zeros(model.p());
    let mut xrow = DVector::zeros(dataset.d());
    for i in 0..n {
        for j in 0..dataset.d() {
            xrow[j] = dataset.labeled_x[(i, j)];
        }
        let ji = model.eval_jacobian(theta, dataset.labeled_y[i], &xrow);
        grad += ji.transpose() * &t1 * sol.weights[i];
    }
    grad *= -(n as f64);
    Ok((sol, grad))
}

/// Profile maximization by BFGS with backtracking. Trial points where the
/// stacked constraint is infeasible are rejected by the line search.
pub fn fit_full_profile(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    theta_init: &DVector<f64>,
    controls: &SolverControls,
) -> Result<ELFit> {
    let mut notes = Vec::new();
    let mut best = run_profile(dataset, model, aux, theta_init, controls)?;

    // Just-identified scores have a cheap exact competitor; keep whichever
    // profile value is higher and flag real disagreement.
    if model.q() == model.p() && aux.r() > 0 {
        if let Ok(two_step) = fit_two_step(dataset, model, aux, controls) {
            let gap = (&two_step.theta_hat - &best.0).norm();
            if gap > 1e-4 {
                notes.push(format!(
                    "two-step and profile estimates disagree by {gap:.3e}"
                ));
            }
            if two_step.log_el > best.2.log_el {
                if let Ok(again) = run_profile(dataset, model, aux, &two_step.theta_hat, controls) {
                    if again.2.log_el > best.2.log_el {
                        best = again;
                    }
                }
            }
        }
    }

    let (theta_hat, path, sol, converged) = best;
    if !converged {
        notes.push("profile iteration limit reached; best iterate returned".into());
    }
    Ok(ELFit {
        theta_hat,
        weights: sol.weights.clone(),
        multipliers: sol.multipliers.clone(),
        log_el: sol.log_el,
        path,
        mode: FitMode::FullProfile,
        converged,
        notes,
    })
}

type ProfileRun = (DVector<f64>, Vec<OuterStep>, ELInnerSolution, bool);

fn run_profile(
    dataset: &PPIDataset,
    model: &MomentModel,
    aux: &AuxMatrix,
    theta_init: &DVector<f64>,
    controls: &SolverControls,
) -> Result<ProfileRun> {
    let n = dataset.n() as f64;
    let p = model.p();
    let mut theta = model.project(theta_init);
    let (mut sol, mut grad) = profile_eval(dataset, model, aux, &theta, None, controls)
        .map_err(|e| match e {
            Error::Infeasible(msg) => Error::Infeasible(format!(
                "stacked constraints infeasible at the initial point ({msg})"
            )),
            other => other,
        })?;
    let mut path = Vec::new();
    // Inverse-Hessian proxy for the ascent direction.
    let mut hinv = DMatrix::identity(p, p);
    let grad_tol = controls.outer_tol * n;

    for _ in 0..controls.max_outer_iters {
        path.push(OuterStep {
            theta: theta.clone(),
            objective: sol.log_el,
            grad_norm: grad.norm(),
        });
        if grad.norm() <= grad_tol {
            return Ok((theta, path, sol, true));
        }
        let mut dir = &hinv * &grad;
        if dir.dot(&grad) <= 0.0 {
            // Reset a corrupted metric.
            hinv = DMatrix::identity(p, p);
            dir = grad.clone();
        }
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial = model.project(&(&theta + &dir * step));
            if trial == theta {
                break;
            }
            match profile_eval(
                dataset,
                model,
                aux,
                &trial,
                Some(&sol.multipliers),
                controls,
            ) {
                Ok((tsol, tgrad)) => {
                    if tsol.log_el >= sol.log_el + 1e-4 * step * dir.dot(&grad) {
                        let s = &trial - &theta;
                        let y = &tgrad - &grad;
                        // BFGS update on the negated objective; skip when
                        // curvature is unusable.
                        let sy = -s.dot(&y);
                        if sy > 1e-12 * s.norm() * y.norm() {
                            let hy = &hinv * -&y;
                            let k = (sy + (-&y).dot(&hy)) / (sy * sy);
                            hinv += &s * s.transpose() * k
                                - (&hy * s.transpose() + &s * hy.transpose()) / sy;
                        }
                        theta = trial;
                        sol = tsol;
                        grad = tgrad;
                        moved = true;
                        break;
                    }
                }
                // An infeasible or stalling inner solve at a probe point
                // only means the trial sits too close to the feasibility
                // boundary; back off rather than abort.
                Err(Error::Infeasible(_)) | Err(Error::NoConvergence(_)) => {}
                Err(other) => return Err(other),
            }
            step *= 0.5;
        }
        if !moved {
            // No ascent along the current metric; retry once with steepest
            // ascent before giving up.
            if hinv != DMatrix::identity(p, p) {
                hinv = DMatrix::identity(p, p);
                continue;
            }
            let done = grad.norm() <= grad_tol.max(1e-6 * n);
            return Ok((theta, path, sol, done));
        }
    }
    let done = grad.norm() <= grad_tol.max(1e-6 * n);
    Ok((theta, path, sol, done))
}

/// Supervised fit: the plain root when the score is square, Qin-Lawless
/// empirical likelihood on the score alone when over-identified.
pub fn fit_supervised(
    dataset: &PPIDataset,
    model: &MomentModel,
    controls: &SolverControls,
) -> Result<ELFit> {
    let n = dataset.n();
    if model.q() == model.p() {
        let init = supervised_init(dataset, model, controls)?;
        let uniform = DVector::from_element(n, 1.0 / n as f64);
        let mut path = Vec::new();
        let log_el = -(n as f64) * (n as f64).ln();
        let theta_hat =
            weighted_score_root(dataset, model, &uniform, &init, controls, &mut path, log_el)?;
        return Ok(ELFit {
            theta_hat,
            weights: uniform,
            multipliers: DVector::zeros(model.q()),
            log_el,
            path,
            mode: FitMode::SupervisedPlain,
            converged: true,
            notes: Vec::new(),
        });
    }
    let init = supervised_init(dataset, model, controls)?;
    let empty = AuxMatrix::empty(n);
    let mut fit = fit_full_profile(dataset, model, &empty, &init, controls)?;
    fit.mode = FitMode::SupervisedEl;
    Ok(fit)
}

/// Builds the auxiliary block and dispatches to the right route. Auxiliary
/// infeasibility (or an empty block) falls back to the supervised path,
/// recorded in `notes`.
pub fn fit(config: &ProblemConfig, dataset: &PPIDataset) -> Result<ELFit> {
    dataset.validate()?;
    let model = &config.model;
    let controls = &config.controls;
    let pilot = supervised_init(dataset, model, controls)?;
    let aux = build_aux(dataset, model, &config.aux, Some(&pilot), config.seed)?;
    let mut carried: Vec<String> = aux.warnings.clone();

    if aux.r() == 0 {
        let mut fit = fit_supervised(dataset, model, controls)?;
        carried.append(&mut fit.notes);
        fit.notes = carried;
        return Ok(fit);
    }

    if model.q() == model.p() {
        match fit_two_step(dataset, model, &aux, controls) {
            Ok(mut fit) => {
                carried.append(&mut fit.notes);
                fit.notes = carried;
                Ok(fit)
            }
            Err(Error::Infeasible(msg)) => {
                let mut fit = fit_supervised(dataset, model, controls)?;
                carried.push(format!("supervised fallback: {msg}"));
                carried.append(&mut fit.notes);
                fit.notes = carried;
                Ok(fit)
            }
            Err(other) => Err(other),
        }
    } else {
        match fit_full_profile(dataset, model, &aux, &pilot, controls) {
            Ok(mut fit) => {
                carried.append(&mut fit.notes);
                fit.notes = carried;
                Ok(fit)
            }
            Err(Error::Infeasible(msg)) => {
                let mut fit = fit_supervised(dataset, model, controls)?;
                carried.push(format!("supervised fallback: {msg}"));
                carried.append(&mut fit.notes);
                fit.notes = carried;
                Ok(fit)
            }
            Err(other) => Err(other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auxiliary::AuxSpec;
    use crate::model::{
        builtin_linreg_model, builtin_mean_model, builtin_overidentified_mean_model,
    };
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
    fn two_step_without_auxiliary_is_the_sample_mean() {
        let data = mean_ds(vec![1.0, 4.0, 4.0, 7.0], vec![0.0; 4], vec![0.0; 2]);
        let model = builtin_mean_model();
        let fit = fit_two_step(&data, &model, &AuxMatrix::empty(4), &SolverControls::default())
            .unwrap();
        assert_abs_diff_eq!(fit.theta_hat[0], 4.0, epsilon = 1e-14);
        for w in fit.weights.iter() {
            assert_abs_diff_eq!(*w, 0.25, epsilon = 1e-14);
        }
    }

    /// Independent scalar route: bisection on the dual of the 1-d
    /// auxiliary-only inner problem.
    fn bisect_weights(z: &[f64]) -> Vec<f64> {
        let n = z.len() as f64;
        let zmin = z.iter().cloned().fold(f64::INFINITY, f64::min);
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lo = -1.0 / zmax + 1e-12;
        let mut hi = -1.0 / zmin - 1e-12;
        let score = |t: f64| z.iter().map(|&zi| zi / (1.0 + t * zi)).sum::<f64>();
        assert!(score(lo) > 0.0 && score(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        z.iter().map(|&zi| 1.0 / (n * (1.0 + t * zi))).collect()
    }

    #[test]
    fn two_step_mean_matches_bisection_oracle() {
        let data = mean_ds(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![5.0, 6.0],
        );
        let model = builtin_mean_model();
        let config = ProblemConfig::new(model.clone(), AuxSpec::default());
        let fit = fit(&config, &data).unwrap();
        assert_eq!(fit.mode, FitMode::TwoStep);

        // Centered prediction column: pooled mean 3.5.
        let z: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| v - 3.5).collect();
        let w = bisect_weights(&z);
        let theta_oracle: f64 = w.iter().zip([1.0, 2.0, 3.0, 4.0]).map(|(wi, y)| wi * y).sum();
        assert_abs_diff_eq!(fit.theta_hat[0], theta_oracle, epsilon = 1e-8);
        for (got, want) in fit.weights.iter().zip(w.iter()) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-8);
        }
        // The score-block multiplier is zero on the two-step route.
        assert_abs_diff_eq!(fit.multipliers[0], 0.0);
    }

    #[test]
    fn two_step_linreg_finds_the_exact_root() {
        let mut rng = rep_rng(3, 0);
        let n = 12;
        let m = 10;
        let d = 2;
        let lx = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let ux = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |i, _| lx[(i, 0)] + lx[(i, 1)]);
        let lyt = y.clone();
        let uyt = DVector::from_fn(m, |j, _| ux[(j, 0)] + ux[(j, 1)]);
        let data = PPIDataset::new(y, lx, lyt, ux, uyt).unwrap();
        let model = builtin_linreg_model(d);
        let config = ProblemConfig::new(model, AuxSpec::default());
        let fit = fit(&config, &data).unwrap();
        assert_eq!(fit.mode, FitMode::TwoStep);
        assert_abs_diff_eq!(fit.theta_hat[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.theta_hat[1], 1.0, epsilon = 1e-8);
    }

    fn overid_ds(n: usize, m: usize, theta: f64, seed: u64) -> PPIDataset {
        let mut rng = rep_rng(seed, 0);
        let mut draw = |k: usize| -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
            let mut y = DVector::zeros(k);
            let x = DMatrix::zeros(k, 0);
            let mut yt = DVector::zeros(k);
            for i in 0..k {
                let x1: f64 = rng.sample::<f64, _>(StandardNormal) * theta;
                let x2: f64 = rng.sample::<f64, _>(StandardNormal) * theta;
                let eps: f64 = rng.sample::<f64, _>(StandardNormal);
                y[i] = theta + x1 + x2 + theta * eps;
                yt[i] = x1 + x2;
            }
            (y, x, yt)
        };
        let (ly, lx, lyt) = draw(n);
        let (_, ux, uyt) = draw(m);
        PPIDataset::new(ly, lx, lyt, ux, uyt).unwrap()
    }

    /// Grid plus golden-section oracle for the 1-d over-identified profile.
    fn grid_profile_argmax(data: &PPIDataset, model: &MomentModel, lo: f64, hi: f64) -> f64 {
        let controls = SolverControls::default();
        let aux = AuxMatrix::empty(data.n());
        let value = |theta: f64| -> f64 {
            let cm = stacked_constraints(data, model, &aux, &DVector::from_vec(vec![theta]))
                .unwrap();
            match solve_inner(&cm, &controls) {
                Ok(sol) => sol.log_el,
                Err(_) => f64::NEG_INFINITY,
            }
        };
        let mut best = lo;
        let mut best_v = value(lo);
        for k in 1..=400 {
            let t = lo + (hi - lo) * k as f64 / 400.0;
            let v = value(t);
            if v > best_v {
                best_v = v;
                best = t;
            }
        }
        let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
        let step = (hi - lo) / 400.0;
        let (mut a, mut b) = (best - step, best + step);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut fc, mut fd) = (value(c), value(d));
        for _ in 0..80 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = value(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = value(d);
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn profile_matches_grid_oracle_on_overidentified_mean() {
        let data = overid_ds(50, 0, 2.0, 17);
        let model = builtin_overidentified_mean_model();
        let controls = SolverControls::default();
        let fit = fit_supervised(&data, &model, &controls).unwrap();
        assert_eq!(fit.mode, FitMode::SupervisedEl);
        assert!(fit.converged);

        let ybar = data.labeled_y.mean();
        let oracle = grid_profile_argmax(&data, &model, ybar / 2.0, 2.0 * ybar);
        assert_abs_diff_eq!(fit.theta_hat[0], oracle, epsilon = 1e-5);
    }

    #[test]
    fn profile_and_two_step_agree_when_just_identified() {
        let mut rng = rep_rng(23, 0);
        let n = 100;
        let d = 2;
        let lx = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let ux = DMatrix::from_fn(300, d, |_, _| rng.random_range(-1.0..1.0));
        let noise = DVector::from_fn(n, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * 0.3
        });
        let y = DVector::from_fn(n, |i, _| lx[(i, 0)] - 0.5 * lx[(i, 1)] + noise[i]);
        let lyt = DVector::from_fn(n, |i, _| lx[(i, 0)] - 0.5 * lx[(i, 1)]);
        let uyt = DVector::from_fn(300, |j, _| ux[(j, 0)] - 0.5 * ux[(j, 1)]);
        let data = PPIDataset::new(y, lx, lyt, ux, uyt).unwrap();
        let model = builtin_linreg_model(d);
        let controls = SolverControls::default();
        let pilot = supervised_init(&data, &model, &controls).unwrap();
        let aux = build_aux(&data, &model, &AuxSpec::default(), Some(&pilot), 0).unwrap();

        let two = fit_two_step(&data, &model, &aux, &controls).unwrap();
        let prof = fit_full_profile(&data, &model, &aux, &pilot, &controls).unwrap();
        assert!((two.theta_hat - prof.theta_hat).norm() <= 1e-6);
        assert_abs_diff_eq!(two.log_el, prof.log_el, epsilon = 1e-7);
    }

    #[test]
    fn two_step_profile_agreement_on_random_instances() {
        let controls = SolverControls::default();
        let model = builtin_mean_model();
        for inst in 0..50 {
            let mut rng = rep_rng(1000 + inst, 0);
            let n = rng.random_range(20..=200);
            let m = rng.random_range(20..=200);
            let mut y = Vec::with_capacity(n);
            let mut yt = Vec::with_capacity(n);
            for _ in 0..n {
                let e: f64 = rng.sample::<f64, _>(StandardNormal);
                let v: f64 = rng.sample::<f64, _>(StandardNormal);
                y.push(v + e);
                yt.push(v);
            }
            let u_yt: Vec<f64> = (0..m)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let data = mean_ds(y, yt, u_yt);
            let degree = 1 + (inst % 3) as usize; // r in {1, 2, 3}
            let spec = AuxSpec::FixedBasis {
                degree,
                include_interactions: true,
            };
            let aux = build_aux(&data, &model, &spec, None, 0).unwrap();
            if aux.r() == 0 {
                continue;
            }
            let two = match fit_two_step(&data, &model, &aux, &controls) {
                Ok(f) => f,
                Err(Error::Infeasible(_)) => continue,
                Err(e) => panic!("two-step failed: {e}"),
            };
            let init = supervised_init(&data, &model, &controls).unwrap();
            let prof = fit_full_profile(&data, &model, &aux, &init, &controls).unwrap();
            assert!(
                (two.theta_hat.clone() - prof.theta_hat.clone()).norm() <= 1e-6,
                "instance {inst}: two-step {} vs profile {}",
                two.theta_hat[0],
                prof.theta_hat[0]
            );
        }
    }

    #[test]
    fn profile_value_is_a_local_maximum() {
        let data = overid_ds(60, 300, 2.0, 5);
        let model = builtin_overidentified_mean_model();
        let controls = SolverControls::default();
        let config = ProblemConfig {
            model: model.clone(),
            aux: AuxSpec::FixedBasis {
                degree: 2,
                include_interactions: true,
            },
            alpha: 0.1,
            seed: 0,
            controls,
        };
        let elfit = fit(&config, &data).unwrap();
        assert_eq!(elfit.mode, FitMode::FullProfile);
        let pilot = supervised_init(&data, &model, &controls).unwrap();
        let aux = build_aux(&data, &model, &config.aux, Some(&pilot), 0).unwrap();
        let delta = 0.05;
        for k in 0..21 {
            let theta = elfit.theta_hat[0] - delta + 2.0 * delta * k as f64 / 20.0;
            let cm = stacked_constraints(&data, &model, &aux, &DVector::from_vec(vec![theta]))
                .unwrap();
            if let Ok(sol) = solve_inner(&cm, &controls) {
                assert!(
                    sol.log_el <= elfit.log_el + 1e-9,
                    "profile not maximal: l({theta}) = {} > {}",
                    sol.log_el,
                    elfit.log_el
                );
            }
        }
    }

    #[test]
    fn dispatch_selects_modes_and_falls_back() {
        let data = mean_ds(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![5.0, 6.0],
        );
        let mean = builtin_mean_model();

        let plain = fit(
            &ProblemConfig::new(mean.clone(), AuxSpec::None),
            &data,
        )
        .unwrap();
        assert_eq!(plain.mode, FitMode::SupervisedPlain);
        assert_abs_diff_eq!(plain.theta_hat[0], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(plain.log_el, -4.0 * 4.0_f64.ln(), epsilon = 1e-12);

        let basis = fit(
            &ProblemConfig::new(mean.clone(), AuxSpec::default()),
            &data,
        )
        .unwrap();
        assert_eq!(basis.mode, FitMode::TwoStep);

        let over = fit(
            &ProblemConfig::new(builtin_overidentified_mean_model(), AuxSpec::None),
            &overid_ds(40, 0, 2.0, 9),
        )
        .unwrap();
        assert_eq!(over.mode, FitMode::SupervisedEl);

        // Labeled predictions all above every unlabeled one: the centered
        // auxiliary column is one-sided and infeasible.
        let skewed = mean_ds(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![10.0, 11.0, 12.0, 13.0],
            vec![0.0, 0.1, 0.2, 0.3],
        );
        let fb = fit(
            &ProblemConfig::new(mean.clone(), AuxSpec::default()),
            &skewed,
        )
        .unwrap();
        assert_eq!(fb.mode, FitMode::SupervisedPlain);
        assert!(fb.notes.iter().any(|n| n.contains("fallback")));
        assert_abs_diff_eq!(fb.theta_hat[0], 2.5, epsilon = 1e-12);

        let direct = fit_two_step(
            &skewed,
            &mean,
            &build_aux(&skewed, &mean, &AuxSpec::default(), None, 0).unwrap(),
            &SolverControls::default(),
        );
        assert!(matches!(direct, Err(Error::Infeasible(_))));
    }
}
