//! Inner empirical-likelihood solver.
//!
//! Given constraint rows `z_i` (length `d`), the inner problem maximizes
//! `sum_i log w_i` over probability weights with `sum_i w_i z_i = 0`. Its
//! dual minimizes the convex function `R(t) = -sum_i log(1 + t'z_i)`, and the
//! optimum satisfies `w_i = 1 / (n (1 + t'z_i))`.
//!
//! The solver runs damped Newton on a quadratically extended log (`log u`
//! for `u >= 1/n`, a matching quadratic below) so every iterate is globally
//! defined. At a genuine optimum all `1 + t'z_i` exceed `1/n` strictly, the
//! extension is inactive, and the modified solution coincides with the exact
//! one; an active extension at convergence means zero is outside or on the
//! boundary of the convex hull of the rows, reported as infeasible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::solve_spd_damped;

/// Iteration and tolerance controls for the inner and outer solvers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverControls {
    /// Inner convergence: `||grad R|| / n <= dual_grad_tol`.
    pub dual_grad_tol: f64,
    pub max_newton_iters: usize,
    /// `||t||` beyond this is treated as a diverging (infeasible) dual.
    pub divergence_norm: f64,
    /// Outer (profile) convergence on the scaled score norm.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
}

impl Default for SolverControls {
    fn default() -> Self {
        Self {
            dual_grad_tol: 1e-10,
            max_newton_iters: 200,
            divergence_norm: 1e8,
            outer_tol: 1e-8,
            max_outer_iters: 200,
        }
    }
}

/// Constraint rows with a leading score block of width `q` followed by
/// auxiliary columns.
#[derive(Debug, Clone)]
pub struct ConstraintMatrix {
    /// `n x (q + r)`; rows are observations.
    pub z: DMatrix<f64>,
    /// Width of the leading score block (0 for auxiliary-only problems).
    pub q: usize,
}

impl ConstraintMatrix {
    pub fn new(z: DMatrix<f64>, q: usize) -> Result<Self> {
        if q > z.ncols() {
            return Err(Error::Dimension(format!(
                "score block {} wider than constraint matrix {}",
                q,
                z.ncols()
            )));
        }
        Ok(Self { z, q })
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    /// Number of auxiliary columns.
    pub fn r(&self) -> usize {
        self.z.ncols() - self.q
    }
}

/// Solution of the inner problem.
#[derive(Debug, Clone)]
pub struct ELInnerSolution {
    /// Dual multipliers, one per constraint column (zero on dropped columns).
    pub multipliers: DVector<f64>,
    /// Probability weights on the `n` rows.
    pub weights: DVector<f64>,
    /// `sum_i log w_i`; at most `-n log n`, with equality iff unconstrained.
    pub log_el: f64,
    pub converged: bool,
    pub newton_iters: usize,
    /// Indices of constant-zero columns removed before solving.
    pub dropped_columns: Vec<usize>,
}

/// Columns whose standard deviation is below `DEGENERATE_REL_SD * scale`
/// are constant: dropped when the constant is zero, infeasible otherwise.
use crate::numeric::DEGENERATE_REL_SD;
const DEGENERATE_MEAN_TOL: f64 = 1e-10;
const ARMIJO_C1: f64 = 1e-4;
const MIN_STEP: f64 = 1e-18;
/// Accept an iteration-limited solve as unconverged-but-usable when the
/// scaled gradient is still below this loose ceiling.
const LOOSE_GRAD_TOL: f64 = 1e-6;

/// Extended log: `log u` for `u >= c`, the C2-matching quadratic below.
#[inline]
fn ext_log(u: f64, c: f64) -> f64 {
    if u >= c {
        u.ln()
    } else {
        c.ln() - 1.5 + 2.0 * u / c - u * u / (2.0 * c * c)
    }
}

#[inline]
fn ext_log_d1(u: f64, c: f64) -> f64 {
    if u >= c {
        1.0 / u
    } else {
        2.0 / c - u / (c * c)
    }
}

#[inline]
fn ext_log_d2(u: f64, c: f64) -> f64 {
    if u >= c {
        -1.0 / (u * u)
    } else {
        -1.0 / (c * c)
    }
}

struct ColumnScan {
    /// Columns that take part in the solve.
    active: Vec<usize>,
    /// Constant-zero columns removed from the problem.
    dropped: Vec<usize>,
}

fn scan_columns(z: &DMatrix<f64>) -> Result<ColumnScan> {
    let n = z.nrows() as f64;
    let mut active = Vec::with_capacity(z.ncols());
    let mut dropped = Vec::new();
    for j in 0..z.ncols() {
        let col = z.column(j);
        let scale = col.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if sd <= DEGENERATE_REL_SD * scale {
            if mean.abs() <= DEGENERATE_MEAN_TOL * scale {
                dropped.push(j);
            } else {
                return Err(Error::Infeasible(format!(
                    "constraint column {j} is constant at {mean:.3e}; its zero-mean constraint cannot hold"
                )));
            }
        } else {
            active.push(j);
        }
    }
    Ok(ColumnScan { active, dropped })
}

/// Solves the inner problem starting from `t = 0`.
pub fn solve_inner(cm: &ConstraintMatrix, controls: &SolverControls) -> Result<ELInnerSolution> {
    solve_inner_warm(cm, None, controls)
}

/// Solves the inner problem from an optional warm-start multiplier
/// (full-width, including dropped columns).
pub fn solve_inner_warm(
    cm: &ConstraintMatrix,
    warm: Option<&DVector<f64>>,
    controls: &SolverControls,
) -> Result<ELInnerSolution> {
    let n = cm.n();
    if n == 0 {
        return Err(Error::Dataset("inner solve on empty sample".into()));
    }
    let d_full = cm.d();
    let nf = n as f64;
    let c = 1.0 / nf;

    let scan = scan_columns(&cm.z)?;
    let d = scan.active.len();
    if d == 0 {
        let w = DVector::from_element(n, 1.0 / nf);
        return Ok(ELInnerSolution {
            multipliers: DVector::zeros(d_full),
            weights: w,
            log_el: -nf * nf.ln(),
            converged: true,
            newton_iters: 0,
            dropped_columns: scan.dropped,
        });
    }

    // Work on the active columns only.
    let mut za = DMatrix::zeros(n, d);
    for (jj, &j) in scan.active.iter().enumerate() {
        za.set_column(jj, &cm.z.column(j));
    }

    let mut t = DVector::zeros(d);
    if let Some(w0) = warm {
        assert_eq!(w0.len(), d_full, "warm start has wrong width");
        for (jj, &j) in scan.active.iter().enumerate() {
            t[jj] = w0[j];
        }
    }

    // u_i = 1 + t'z_i; objective R(t) = -sum ext_log(u_i).
    let mut u = DVector::from_element(n, 1.0);
    let eval_u = |t: &DVector<f64>, u: &mut DVector<f64>| {
        u.copy_from(&(&za * t));
        u.add_scalar_mut(1.0);
    };
    let obj = |u: &DVector<f64>| -> f64 { -u.iter().map(|&ui| ext_log(ui, c)).sum::<f64>() };

    eval_u(&t, &mut u);
    let mut r_val = obj(&u);
    let mut iters = 0;
    let mut converged = false;

    let mut grad = DVector::zeros(d);
    let mut psi = DVector::zeros(n);
    for _ in 0..controls.max_newton_iters {
        // grad R = -sum_i z_i * ext_log'(u_i)
        for i in 0..n {
            psi[i] = ext_log_d1(u[i], c);
        }
        grad.copy_from(&(za.transpose() * &psi));
        grad.neg_mut();
        if grad.norm() / nf <= controls.dual_grad_tol {
            converged = true;
            break;
        }
        // Hessian = sum_i z_i z_i' * (-ext_log''(u_i)); scale rows by sqrt.
        let mut zs = za.clone();
        for i in 0..n {
            let s = (-ext_log_d2(u[i], c)).sqrt();
            for j in 0..d {
                zs[(i, j)] *= s;
            }
        }
        let h = zs.transpose() * &zs;
        let dir = solve_spd_damped(&h, &(-&grad))?;

        // Armijo backtracking on the extended objective.
        let slope = grad.dot(&dir);
        let mut step = 1.0;
        let mut accepted = false;
        while step >= MIN_STEP {
            let t_new = &t + &dir * step;
            eval_u(&t_new, &mut u);
            let r_new = obj(&u);
            if r_new <= r_val + ARMIJO_C1 * step * slope {
                t = t_new;
                r_val = r_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iters += 1;
        if !accepted {
            // Restore u to the current iterate and stop: no descent left.
            eval_u(&t, &mut u);
            break;
        }
        if t.norm() > controls.divergence_norm {
            return Err(Error::Infeasible(
                "dual multipliers diverged; zero is outside the constraint hull".into(),
            ));
        }
    }

    if !converged {
        for i in 0..n {
            psi[i] = ext_log_d1(u[i], c);
        }
        grad.copy_from(&(za.transpose() * &psi));
        grad.neg_mut();
        let gn = grad.norm() / nf;
        if gn <= controls.dual_grad_tol {
            converged = true;
        } else if gn > LOOSE_GRAD_TOL {
            return Err(Error::NoConvergence(format!(
                "inner Newton stopped after {iters} iterations with scaled gradient {gn:.3e}"
            )));
        }
    }

    // Genuine solution requires every u_i strictly above the barrier floor.
    let umin = u.min();
    if umin <= c * (1.0 - 1e-10) {
        return Err(Error::Infeasible(format!(
            "support constraint active (min 1+t'z = {umin:.6e} <= 1/n); zero is outside or on the hull boundary"
        )));
    }

    let weights = DVector::from_fn(n, |i, _| 1.0 / (nf * u[i]));
    let log_el = weights.iter().map(|w| w.ln()).sum::<f64>();
    let mut multipliers = DVector::zeros(d_full);
    for (jj, &j) in scan.active.iter().enumerate() {
        multipliers[j] = t[jj];
    }
    Ok(ELInnerSolution {
        multipliers,
        weights,
        log_el,
        converged,
        newton_iters: iters,
        dropped_columns: scan.dropped,
    })
}

/// Log empirical likelihood evaluated at given multipliers:
/// `-sum_i log(1 + t'z_i) - n log n`, which equals `sum_i log w_i` for the
/// induced weights. Arguments outside the positivity region are evaluated
/// through the quadratic extension of the modified log; use
/// [`barrier_extension_active`] to detect that case.
pub fn log_el_at(cm: &ConstraintMatrix, t: &DVector<f64>) -> f64 {
    let n = cm.n();
    assert_eq!(t.len(), cm.d(), "multiplier width mismatch");
    let nf = n as f64;
    let c = 1.0 / nf;
    let u = &cm.z * t;
    -u.iter().map(|&ui| ext_log(1.0 + ui, c)).sum::<f64>() - nf * nf.ln()
}

/// True when some `1 + t'z_i` falls below the barrier floor `1/n`, i.e.
/// [`log_el_at`] used the quadratic extension somewhere.
pub fn barrier_extension_active(cm: &ConstraintMatrix, t: &DVector<f64>) -> bool {
    let c = 1.0 / cm.n() as f64;
    let u = &cm.z * t;
    u.iter().any(|&ui| 1.0 + ui < c)
}

/// Result of a feasibility probe: is zero inside the open convex hull of
/// the constraint rows?
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Positive margin means comfortably feasible. For `d = 1` this is the
    /// distance from zero to the nearer hull endpoint over the data scale;
    /// for `d = 2` it reflects the largest angular gap; for `d >= 3` it is
    /// the slack `min_i (1 + t'z_i) - 1/n` at the solved dual (heuristic).
    pub margin: f64,
}

/// Checks whether the zero-mean constraint set is feasible. Exact for
/// `d <= 2`, a dual-solve heuristic for higher dimensions.
pub fn feasibility_check(cm: &ConstraintMatrix, controls: &SolverControls) -> FeasibilityReport {
    let scan = match scan_columns(&cm.z) {
        Ok(s) => s,
        Err(_) => {
            return FeasibilityReport {
                feasible: false,
                margin: -1.0,
            }
        }
    };
    let n = cm.n();
    let cols: Vec<usize> = scan.active;
    match cols.len() {
        0 => FeasibilityReport {
            feasible: n > 0,
            margin: 1.0,
        },
        1 => {
            let col = cm.z.column(cols[0]);
            let mx = col.max();
            let mn = col.min();
            let scale = mx.abs().max(mn.abs()).max(f64::MIN_POSITIVE);
            FeasibilityReport {
                feasible: mn < 0.0 && mx > 0.0,
                margin: mx.min(-mn) / scale,
            }
        }
        2 => {
            // Zero is outside the hull of planar points iff all points fit in
            // an open half-plane, i.e. the largest angular gap exceeds pi.
            let (j0, j1) = (cols[0], cols[1]);
            let mut angles: Vec<f64> = Vec::with_capacity(n);
            for i in 0..n {
                let (a, b) = (cm.z[(i, j0)], cm.z[(i, j1)]);
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                angles.push(b.atan2(a));
            }
            if angles.is_empty() {
                return FeasibilityReport {
                    feasible: false,
                    margin: -1.0,
                };
            }
            angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let mut max_gap = 0.0_f64;
            for k in 1..angles.len() {
                max_gap = max_gap.max(angles[k] - angles[k - 1]);
            }
            max_gap = max_gap.max(angles[0] + 2.0 * std::f64::consts::PI - angles[angles.len() - 1]);
            FeasibilityReport {
                feasible: max_gap < std::f64::consts::PI,
                margin: (std::f64::consts::PI - max_gap) / std::f64::consts::PI,
            }
        }
        _ => match solve_inner(cm, controls) {
            Ok(sol) => {
                let nf = n as f64;
                let umin = sol
                    .weights
                    .iter()
                    .map(|&w| 1.0 / (nf * w))
                    .fold(f64::INFINITY, f64::min);
                FeasibilityReport {
                    feasible: true,
                    margin: umin - 1.0 / nf,
                }
            }
            Err(_) => FeasibilityReport {
                feasible: false,
                margin: -1.0,
            },
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn controls() -> SolverControls {
        SolverControls::default()
    }

    fn cm1(vals: &[f64]) -> ConstraintMatrix {
        ConstraintMatrix::new(DMatrix::from_column_slice(vals.len(), 1, vals), 1).unwrap()
    }

    /// Independent scalar oracle: the dual root solves
    /// `sum_i z_i / (1 + t z_i) = 0` on the feasible interval; bisection
    /// needs only sign evaluations of that plain equation.
    fn bisect_dual_root(z: &[f64]) -> f64 {
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let zmin = z.iter().cloned().fold(f64::MAX, f64::min);
        assert!(zmin < 0.0 && zmax > 0.0);
        let eps = 1e-13;
        let mut lo = -1.0 / zmax + eps;
        let mut hi = -1.0 / zmin - eps;
        let f = |t: f64| z.iter().map(|&zi| zi / (1.0 + t * zi)).sum::<f64>();
        // f is decreasing in t on the interval; f(lo) > 0 > f(hi).
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn check_identities(cm: &ConstraintMatrix, sol: &ELInnerSolution) {
        let n = cm.n() as f64;
        assert!(sol.weights.iter().all(|&w| w > 0.0));
        assert_abs_diff_eq!(sol.weights.sum(), 1.0, epsilon = 1e-10);
        // w_i * n * (1 + t'z_i) = 1
        for i in 0..cm.n() {
            let u = 1.0 + cm.z.row(i).transpose().dot(&sol.multipliers);
            assert_abs_diff_eq!(sol.weights[i] * n * u, 1.0, epsilon = 1e-10);
        }
        // weighted constraint means vanish
        let wz = cm.z.transpose() * &sol.weights;
        assert!(wz.norm() <= 1e-8, "weighted means {:.3e}", wz.norm());
    }

    #[test]
    fn matches_scalar_bisection_oracle() {
        let z = [-1.0, 0.5, 2.0];
        let t_star = bisect_dual_root(&z);
        let cm = cm1(&z);
        let sol = solve_inner(&cm, &controls()).unwrap();
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.multipliers[0], t_star, epsilon = 1e-8);
        let log_el_oracle: f64 = z
            .iter()
            .map(|&zi| (1.0 / (3.0 * (1.0 + t_star * zi))).ln())
            .sum();
        assert_abs_diff_eq!(sol.log_el, log_el_oracle, epsilon = 1e-8);
        check_identities(&cm, &sol);

        // Evaluation at given multipliers reproduces the same value.
        let t_vec = DVector::from_column_slice(&[t_star]);
        assert_abs_diff_eq!(log_el_at(&cm, &t_vec), log_el_oracle, epsilon = 1e-10);
        assert!(!barrier_extension_active(&cm, &t_vec));
    }

    #[test]
    fn log_el_at_zero_multiplier_is_uniform() {
        let cm = cm1(&[3.0, -1.0, 0.5, 2.0, -2.5]);
        let t = DVector::zeros(1);
        assert_abs_diff_eq!(log_el_at(&cm, &t), -5.0 * 5.0_f64.ln(), epsilon = 1e-12);
        // Far outside the positivity region the extension keeps it finite.
        let t_big = DVector::from_column_slice(&[5.0]);
        assert!(barrier_extension_active(&cm, &t_big));
        assert!(log_el_at(&cm, &t_big).is_finite());
    }

    #[test]
    fn zero_mean_columns_solve_immediately() {
        let z = DMatrix::from_row_slice(4, 2, &[1.0, -2.0, -1.0, 2.0, 2.0, 1.0, -2.0, -1.0]);
        let cm = ConstraintMatrix::new(z, 2).unwrap();
        let sol = solve_inner(&cm, &controls()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.newton_iters, 0);
        assert_abs_diff_eq!(sol.multipliers.norm(), 0.0, epsilon = 1e-12);
        for w in sol.weights.iter() {
            assert_abs_diff_eq!(*w, 0.25, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(sol.log_el, -4.0 * 4.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn one_sided_data_is_infeasible() {
        let cm = cm1(&[0.5, 1.0, 2.0, 0.1]);
        match solve_inner(&cm, &controls()) {
            Err(Error::Infeasible(_)) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
        let rep = feasibility_check(&cm, &controls());
        assert!(!rep.feasible);

        let ok = cm1(&[-0.5, 1.0, 2.0, 0.1]);
        assert!(feasibility_check(&ok, &controls()).feasible);
        assert!(solve_inner(&ok, &controls()).is_ok());
    }

    #[test]
    fn planar_feasibility_is_exact() {
        // Points spanning the plane around zero: feasible.
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.1, 0.0, 1.0, 0.1, -1.0]);
        let cm = ConstraintMatrix::new(z, 0).unwrap();
        assert!(feasibility_check(&cm, &controls()).feasible);
        // All points in the open right half-plane: infeasible.
        let z2 = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 2.0, -0.5, 0.5, 0.0]);
        let cm2 = ConstraintMatrix::new(z2, 0).unwrap();
        assert!(!feasibility_check(&cm2, &controls()).feasible);
        assert!(solve_inner(&cm2, &controls()).is_err());
    }

    #[test]
    fn constant_zero_column_is_dropped_constant_nonzero_rejected() {
        let z = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.5, 0.0, 2.0, 0.0]);
        let cm = ConstraintMatrix::new(z, 1).unwrap();
        let sol = solve_inner(&cm, &controls()).unwrap();
        assert_eq!(sol.dropped_columns, vec![1]);
        assert_abs_diff_eq!(sol.multipliers[1], 0.0, epsilon = 0.0);
        let t_star = bisect_dual_root(&[-1.0, 0.5, 2.0]);
        assert_abs_diff_eq!(sol.multipliers[0], t_star, epsilon = 1e-8);

        let z2 = DMatrix::from_row_slice(3, 2, &[-1.0, 0.7, 0.5, 0.7, 2.0, 0.7]);
        let cm2 = ConstraintMatrix::new(z2, 1).unwrap();
        assert!(matches!(solve_inner(&cm2, &controls()), Err(Error::Infeasible(_))));
    }

    #[test]
    fn adding_a_constraint_never_raises_log_el() {
        let mut rng = crate::numeric::rep_rng(11, 0);
        for _ in 0..20 {
            let n = 12;
            let mut a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            let mut b: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            // Recenter so both constraint sets are feasible.
            let ma = a.iter().sum::<f64>() / n as f64;
            let mb = b.iter().sum::<f64>() / n as f64;
            a.iter_mut().for_each(|v| *v -= ma);
            b.iter_mut().for_each(|v| *v -= mb);
            // Shift slightly off-center to keep the solve nontrivial.
            a.iter_mut().for_each(|v| *v += 0.02);
            b.iter_mut().for_each(|v| *v += 0.01);

            let cm_one = cm1(&a);
            let mut zb = DMatrix::zeros(n, 2);
            for i in 0..n {
                zb[(i, 0)] = a[i];
                zb[(i, 1)] = b[i];
            }
            let cm_two = ConstraintMatrix::new(zb, 1).unwrap();
            let l1 = solve_inner(&cm_one, &controls()).unwrap().log_el;
            let l2 = solve_inner(&cm_two, &controls()).unwrap().log_el;
            assert!(
                l2 <= l1 + 1e-9,
                "extra constraint raised log EL: {l2} > {l1}"
            );
            assert!(l1 <= -(n as f64) * (n as f64).ln() + 1e-9);
        }
    }

    #[test]
    fn warm_start_agrees_with_cold_start() {
        let z = [-1.0, 0.5, 2.0, -0.3, 0.9];
        let cm = cm1(&z);
        let cold = solve_inner(&cm, &controls()).unwrap();
        let warm0 = DVector::from_column_slice(&[cold.multipliers[0] * 0.9]);
        let warm = solve_inner_warm(&cm, Some(&warm0), &controls()).unwrap();
        assert_abs_diff_eq!(cold.multipliers[0], warm.multipliers[0], epsilon = 1e-9);
        assert!(warm.newton_iters <= cold.newton_iters);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn identities_hold_on_recentered_instances(
            seed in 0u64..1000,
            n in 6usize..40,
            d in 1usize..4,
        ) {
            use rand::Rng;
            let mut rng = crate::numeric::rep_rng(seed, 99);
            let mut z = DMatrix::zeros(n, d);
            for j in 0..d {
                let vals: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                for i in 0..n {
                    // recentering keeps zero inside the hull
                    z[(i, j)] = vals[i] - mean + 0.01 * (rng.random::<f64>() - 0.5);
                }
            }
            let cm = ConstraintMatrix::new(z, d.min(1)).unwrap();
            let ctl = SolverControls::default();
            if let Ok(sol) = solve_inner(&cm, &ctl) {
                let nf = n as f64;
                prop_assert!((sol.weights.sum() - 1.0).abs() <= 1e-10);
                for i in 0..n {
                    let u = 1.0 + cm.z.row(i).transpose().dot(&sol.multipliers);
                    prop_assert!((sol.weights[i] * nf * u - 1.0).abs() <= 1e-10);
                }
                let wz = cm.z.transpose() * &sol.weights;
                prop_assert!(wz.norm() <= 1e-8);
                prop_assert!(sol.log_el <= -nf * nf.ln() + 1e-9);
            }
        }
    }
}
