//! Scenario data generators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal, StudentT};

use super::{MeanDist, Scenario, ScenarioParams};
use crate::auxiliary::{fit_learner, LearnerSpec};
use crate::error::Result;
use crate::model::PPIDataset;
use crate::numeric::normal_quantile;

fn draw_mean_component(dist: MeanDist, rng: &mut ChaCha8Rng) -> f64 {
    match dist {
        MeanDist::Normal => rng.sample(StandardNormal),
        MeanDist::Exp => rng.sample(Exp::new(2.0).unwrap()),
    }
}

/// True parameter of the scenario, when one exists.
pub fn true_theta(scenario: Scenario, params: &ScenarioParams) -> Option<DVector<f64>> {
    match scenario {
        Scenario::MeanInference => Some(DVector::from_vec(vec![match params.dist {
            MeanDist::Normal => 0.0,
            // Both components have mean 1/2 under the rate-2 exponential.
            MeanDist::Exp => 1.0,
        }])),
        Scenario::Linreg => {
            let d = params.resolved_d(scenario);
            let mut theta = DVector::zeros(d);
            theta[0] = 1.0;
            if d > 1 {
                theta[1] = 1.0;
            }
            Some(theta)
        }
        Scenario::Overidentified => Some(DVector::from_vec(vec![params.theta])),
        Scenario::DistLearning => None,
    }
}

/// Query points and true values for distribution-learning evaluation: the
/// nine population deciles of the response, which is normal with variance
/// `1 + sigma^2`.
pub fn dist_eval_grid(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let sd = (1.0 + sigma * sigma).sqrt();
    let ys: Vec<f64> = (1..=9)
        .map(|k| sd * normal_quantile(k as f64 / 10.0))
        .collect();
    let fs: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    (ys, fs)
}

/// Draws one dataset for the scenario.
pub fn generate(
    scenario: Scenario,
    params: &ScenarioParams,
    n: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PPIDataset> {
    match scenario {
        Scenario::MeanInference => {
            let mut y = DVector::zeros(n);
            let mut yt = DVector::zeros(n);
            let mut x = DMatrix::zeros(n, 1);
            for i in 0..n {
                let xi = draw_mean_component(params.dist, rng);
                let e = draw_mean_component(params.dist, rng);
                let et: f64 = rng.sample(StandardNormal);
                y[i] = xi + e;
                yt[i] = xi + et;
                x[(i, 0)] = xi;
            }
            let mut u_yt = DVector::zeros(m);
            let mut u_x = DMatrix::zeros(m, 1);
            for i in 0..m {
                let xi = draw_mean_component(params.dist, rng);
                let et: f64 = rng.sample(StandardNormal);
                u_yt[i] = xi + et;
                u_x[(i, 0)] = xi;
            }
            PPIDataset::new(y, x, yt, u_x, u_yt)
        }
        Scenario::Linreg => {
            let d = params.resolved_d(scenario);
            let t3 = StudentT::new(3.0).unwrap();
            let signal = |row: &DMatrix<f64>, i: usize| {
                let a = row[(i, 0)];
                let b = if d > 1 { row[(i, 1)] } else { 0.0 };
                a + a * a + b + b * b
            };
            let mut x = DMatrix::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    x[(i, j)] = rng.sample(StandardNormal);
                }
            }
            let mut y = DVector::zeros(n);
            let mut yt = DVector::zeros(n);
            for i in 0..n {
                let mu = signal(&x, i);
                let e: f64 = rng.sample(t3);
                let et: f64 = rng.sample(StandardNormal);
                y[i] = mu + 0.5 * e;
                yt[i] = mu + params.rho * et;
            }
            let mut u_x = DMatrix::zeros(m, d);
            for i in 0..m {
                for j in 0..d {
                    u_x[(i, j)] = rng.sample(StandardNormal);
                }
            }
            let mut u_yt = DVector::zeros(m);
            for i in 0..m {
                let mu = signal(&u_x, i);
                let et: f64 = rng.sample(StandardNormal);
                u_yt[i] = mu + params.rho * et;
            }
            PPIDataset::new(y, x, yt, u_x, u_yt)
        }
        Scenario::Overidentified => {
            let theta = params.theta;
            let mut y = DVector::zeros(n);
            let mut yt = DVector::zeros(n);
            let mut x = DMatrix::zeros(n, 2);
            for i in 0..n {
                let x1 = theta * rng.sample::<f64, _>(StandardNormal);
                let x2 = theta * rng.sample::<f64, _>(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                y[i] = theta + x1 + x2 + theta * e;
                yt[i] = x1 + x2;
                x[(i, 0)] = x1;
                x[(i, 1)] = x2;
            }
            let mut u_yt = DVector::zeros(m);
            let mut u_x = DMatrix::zeros(m, 2);
            for i in 0..m {
                let x1 = theta * rng.sample::<f64, _>(StandardNormal);
                let x2 = theta * rng.sample::<f64, _>(StandardNormal);
                u_yt[i] = x1 + x2;
                u_x[(i, 0)] = x1;
                u_x[(i, 1)] = x2;
            }
            PPIDataset::new(y, x, yt, u_x, u_yt)
        }
        Scenario::DistLearning => {
            let d = params.resolved_d(scenario);
            let d1 = ((0.15 * d as f64).ceil() as usize).max(1);
            let scale = 1.0 / (d1 as f64).sqrt();
            let sigma = params.sigma;
            let mut draw_block = |count: usize| -> (DMatrix<f64>, DVector<f64>) {
                let mut x = DMatrix::zeros(count, d);
                let mut y = DVector::zeros(count);
                for i in 0..count {
                    let mut mu = 0.0;
                    for j in 0..d {
                        let v: f64 = rng.sample(StandardNormal);
                        x[(i, j)] = v;
                        if j < d1 {
                            mu += v;
                        }
                    }
                    let e: f64 = rng.sample(StandardNormal);
                    y[i] = scale * mu + sigma * e;
                }
                (x, y)
            };

            // External predictor trained on an independent draw.
            let (train_x, train_y) = draw_block(1000);
            let learner = fit_learner(
                &LearnerSpec::RidgePoly {
                    degree: 2,
                    lambda: None,
                },
                &train_x,
                &DMatrix::from_column_slice(train_y.len(), 1, train_y.as_slice()),
                train_x.nrows(),
                1,
            )?;

            let (x, y) = draw_block(n);
            let (u_x, _) = draw_block(m);
            let yt = DVector::from_column_slice(learner.predict(&x).column(0).as_slice());
            let u_yt = DVector::from_column_slice(learner.predict(&u_x).column(0).as_slice());
            PPIDataset::new(y, x, yt, u_x, u_yt)
        }
    }
}
