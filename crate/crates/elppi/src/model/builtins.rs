//! Built-in moment models used by the experiment harness and the CLI.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::MomentModel;

/// Mean model: `g(theta; y) = y - theta`, `p = q = 1`.
pub fn builtin_mean_model() -> MomentModel {
    MomentModel::new(
        "mean",
        1,
        1,
        Arc::new(|theta: &DVector<f64>, y: f64, _x: &DVector<f64>| {
            DVector::from_column_slice(&[y - theta[0]])
        }),
        Some(Arc::new(|_theta: &DVector<f64>, _y: f64, _x: &DVector<f64>| {
            DMatrix::from_column_slice(1, 1, &[-1.0])
        })),
        None,
    )
    .expect("mean model is well-formed")
}

/// Linear regression score without intercept: `g(theta; y, x) = x (x'theta - y)`,
/// `p = q = d`. The estimand is the population least-squares projection.
pub fn builtin_linreg_model(d: usize) -> MomentModel {
    assert!(d >= 1, "linreg needs at least one covariate");
    MomentModel::new(
        format!("linreg{d}"),
        d,
        d,
        Arc::new(move |theta: &DVector<f64>, y: f64, x: &DVector<f64>| {
            let resid = x.dot(theta) - y;
            x * resid
        }),
        Some(Arc::new(move |_theta: &DVector<f64>, _y: f64, x: &DVector<f64>| {
            // dg/dtheta = x x'
            x * x.transpose()
        })),
        None,
    )
    .expect("linreg model is well-formed")
}

/// Over-identified location model with `p = 1`, `q = 2`:
/// `g(theta; y) = (y - theta, y^2 - 4 theta^2)`, valid for `theta > 0`
/// populations where `E(Y) = theta` and `E(Y^2) = 4 theta^2`.
pub fn builtin_overidentified_mean_model() -> MomentModel {
    MomentModel::new(
        "overidentified_mean",
        1,
        2,
        Arc::new(|theta: &DVector<f64>, y: f64, _x: &DVector<f64>| {
            let t = theta[0];
            DVector::from_column_slice(&[y - t, y * y - 4.0 * t * t])
        }),
        Some(Arc::new(|theta: &DVector<f64>, _y: f64, _x: &DVector<f64>| {
            DMatrix::from_column_slice(2, 1, &[-1.0, -8.0 * theta[0]])
        })),
        Some(vec![(1e-8, f64::INFINITY)]),
    )
    .expect("over-identified model is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_model_score_and_jacobian() {
        let m = builtin_mean_model();
        let theta = DVector::from_column_slice(&[2.0]);
        let x = DVector::zeros(0);
        assert_abs_diff_eq!(m.eval_g(&theta, 5.0, &x)[0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.eval_jacobian(&theta, 5.0, &x)[(0, 0)], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn linreg_score_vanishes_at_exact_fit() {
        let m = builtin_linreg_model(2);
        let theta = DVector::from_column_slice(&[1.0, -2.0]);
        let x = DVector::from_column_slice(&[0.5, 1.5]);
        let y = x.dot(&theta);
        let g = m.eval_g(&theta, y, &x);
        assert_abs_diff_eq!(g.norm(), 0.0, epsilon = 1e-15);
        let j = m.eval_jacobian(&theta, y, &x);
        assert_abs_diff_eq!(j[(0, 0)], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(0, 1)], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 1)], 2.25, epsilon = 1e-15);
    }

    #[test]
    fn linreg_matches_stated_values() {
        let m = builtin_linreg_model(2);
        let x = DVector::from_column_slice(&[1.0, 2.0]);
        let zero = DVector::from_column_slice(&[0.0, 0.0]);
        let g = m.eval_g(&zero, 3.0, &x);
        assert_abs_diff_eq!(g[0], -3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], -6.0, epsilon = 1e-15);
        let one = DVector::from_column_slice(&[1.0, 1.0]);
        assert_abs_diff_eq!(m.eval_g(&one, 3.0, &x).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn overidentified_model_is_exact_at_matched_moments() {
        let m = builtin_overidentified_mean_model();
        let theta = DVector::from_column_slice(&[2.0]);
        let x = DVector::zeros(0);
        // E(Y) = 2, E(Y^2) = 16 at theta = 2 gives zero mean score.
        let g1 = m.eval_g(&theta, 2.0, &x);
        assert_abs_diff_eq!(g1[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g1[1], 2.0 * 2.0 - 16.0, epsilon = 1e-15);
        let j = m.eval_jacobian(&theta, 2.0, &x);
        assert_abs_diff_eq!(j[(0, 0)], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 0)], -16.0, epsilon = 1e-15);
        assert!(!m.contains(&DVector::from_column_slice(&[-1.0])));
    }
}
