//! Moment models and datasets.
//!
//! A [`MomentModel`] supplies the estimating function `g(theta; y, x)` whose
//! population mean is zero at the true parameter, together with its Jacobian
//! in `theta` (analytic if given, otherwise central finite differences).
//! A [`PPIDataset`] couples a small labeled sample with a large unlabeled
//! sample carrying predictions.

mod builtins;
mod io;

pub use builtins::{builtin_linreg_model, builtin_mean_model, builtin_overidentified_mean_model};
pub use io::{load_dataset, save_dataset, ColumnSchema, FitConfig, ModelSpec};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::el::SolverControls;
use crate::error::{Error, Result};

type GFn = dyn Fn(&DVector<f64>, f64, &DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>, f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Relative step for the finite-difference Jacobian fallback.
const FD_REL_STEP: f64 = 1e-6;

/// A moment model `E[g(theta*; Y, X)] = 0` with `p` parameters and `q >= p`
/// moment components.
#[derive(Clone)]
pub struct MomentModel {
    name: String,
    p: usize,
    q: usize,
    g: Arc<GFn>,
    jac: Option<Arc<JacFn>>,
    /// Box constraints per parameter, `(lo, hi)`; infinite bounds allowed.
    domain: Option<Vec<(f64, f64)>>,
}

impl fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MomentModel")
            .field("name", &self.name)
            .field("p", &self.p)
            .field("q", &self.q)
            .field("analytic_jacobian", &self.jac.is_some())
            .field("domain", &self.domain)
            .finish()
    }
}

impl MomentModel {
    pub fn new(
        name: impl Into<String>,
        p: usize,
        q: usize,
        g: Arc<GFn>,
        jac: Option<Arc<JacFn>>,
        domain: Option<Vec<(f64, f64)>>,
    ) -> Result<Self> {
        if p == 0 || q < p {
            return Err(Error::InvalidArgument(format!(
                "moment model needs p >= 1 and q >= p, got p={p}, q={q}"
            )));
        }
        if let Some(dom) = &domain {
            if dom.len() != p {
                return Err(Error::Dimension(format!(
                    "domain has {} boxes for p={} parameters",
                    dom.len(),
                    p
                )));
            }
            if dom.iter().any(|(lo, hi)| lo >= hi) {
                return Err(Error::InvalidArgument("empty domain box".into()));
            }
        }
        Ok(Self {
            name: name.into(),
            p,
            q,
            g,
            jac,
            domain,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// True when `q > p` (more moment components than parameters).
    pub fn over_identified(&self) -> bool {
        self.q > self.p
    }

    pub fn domain(&self) -> Option<&[(f64, f64)]> {
        self.domain.as_deref()
    }

    /// Whether `theta` lies inside the domain box (inclusive).
    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        match &self.domain {
            None => true,
            Some(dom) => theta
                .iter()
                .zip(dom.iter())
                .all(|(t, (lo, hi))| *t >= *lo && *t <= *hi),
        }
    }

    /// Clamps `theta` into the domain box.
    pub fn project(&self, theta: &DVector<f64>) -> DVector<f64> {
        match &self.domain {
            None => theta.clone(),
            Some(dom) => DVector::from_fn(self.p, |k, _| theta[k].clamp(dom[k].0, dom[k].1)),
        }
    }

    /// Evaluates `g(theta; y, x)`, a `q`-vector.
    pub fn eval_g(&self, theta: &DVector<f64>, y: f64, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(theta.len(), self.p);
        let out = (self.g)(theta, y, x);
        debug_assert_eq!(out.len(), self.q);
        out
    }

    /// Evaluates the `q x p` Jacobian `dg/dtheta`. Uses the analytic
    /// Jacobian when supplied, otherwise a central finite difference with
    /// step `1e-6 * (1 + |theta_k|)` per coordinate (one-sided at a domain
    /// boundary).
    pub fn eval_jacobian(&self, theta: &DVector<f64>, y: f64, x: &DVector<f64>) -> DMatrix<f64> {
        if let Some(jac) = &self.jac {
            let out = jac(theta, y, x);
            debug_assert_eq!((out.nrows(), out.ncols()), (self.q, self.p));
            return out;
        }
        let mut out = DMatrix::zeros(self.q, self.p);
        for k in 0..self.p {
            let h = FD_REL_STEP * (1.0 + theta[k].abs());
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += h;
            dn[k] -= h;
            let (gu, gd, denom) = if self.contains(&up) && self.contains(&dn) {
                (self.eval_g(&up, y, x), self.eval_g(&dn, y, x), 2.0 * h)
            } else if self.contains(&up) {
                (self.eval_g(&up, y, x), self.eval_g(theta, y, x), h)
            } else {
                (self.eval_g(theta, y, x), self.eval_g(&dn, y, x), h)
            };
            for r in 0..self.q {
                out[(r, k)] = (gu[r] - gd[r]) / denom;
            }
        }
        out
    }

    /// Stacks `g(theta; y_i, x_i)` over rows of `(ys, xs)` into an `n x q` matrix.
    pub fn g_matrix(&self, theta: &DVector<f64>, ys: &DVector<f64>, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = ys.len();
        assert_eq!(xs.nrows(), n, "g_matrix: row mismatch");
        let mut out = DMatrix::zeros(n, self.q);
        let mut xrow = DVector::zeros(xs.ncols());
        for i in 0..n {
            for j in 0..xs.ncols() {
                xrow[j] = xs[(i, j)];
            }
            let gi = self.eval_g(theta, ys[i], &xrow);
            for j in 0..self.q {
                out[(i, j)] = gi[j];
            }
        }
        out
    }

    /// Sample mean of the Jacobian over rows of `(ys, xs)`, a `q x p` matrix.
    pub fn jacobian_mean(
        &self,
        theta: &DVector<f64>,
        ys: &DVector<f64>,
        xs: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let n = ys.len();
        assert!(n > 0);
        assert_eq!(xs.nrows(), n, "jacobian_mean: row mismatch");
        let mut acc = DMatrix::zeros(self.q, self.p);
        let mut xrow = DVector::zeros(xs.ncols());
        for i in 0..n {
            for j in 0..xs.ncols() {
                xrow[j] = xs[(i, j)];
            }
            acc += self.eval_jacobian(theta, ys[i], &xrow);
        }
        acc / n as f64
    }
}

/// Labeled sample `(y, x, y_tilde)` of size `n` plus unlabeled sample
/// `(x, y_tilde)` of size `m`. Predictions `y_tilde` are present on both.
#[derive(Debug, Clone, PartialEq)]
pub struct PPIDataset {
    pub labeled_y: DVector<f64>,
    pub labeled_x: DMatrix<f64>,
    pub labeled_ytilde: DVector<f64>,
    pub unlabeled_x: DMatrix<f64>,
    pub unlabeled_ytilde: DVector<f64>,
}

impl PPIDataset {
    pub fn new(
        labeled_y: DVector<f64>,
        labeled_x: DMatrix<f64>,
        labeled_ytilde: DVector<f64>,
        unlabeled_x: DMatrix<f64>,
        unlabeled_ytilde: DVector<f64>,
    ) -> Result<Self> {
        let ds = Self {
            labeled_y,
            labeled_x,
            labeled_ytilde,
            unlabeled_x,
            unlabeled_ytilde,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.labeled_y.len()
    }

    pub fn m(&self) -> usize {
        self.unlabeled_ytilde.len()
    }

    /// Number of covariates.
    pub fn d(&self) -> usize {
        self.labeled_x.ncols()
    }

    /// Labeled fraction `n / (n + m)`.
    pub fn gamma_n(&self) -> f64 {
        let n = self.n() as f64;
        n / (n + self.m() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n < 2 {
            return Err(Error::Dataset(format!(
                "insufficient data: {n} labeled row(s), need at least 2"
            )));
        }
        if self.labeled_x.nrows() != n || self.labeled_ytilde.len() != n {
            return Err(Error::Dataset("labeled block row mismatch".into()));
        }
        if self.unlabeled_x.nrows() != self.m() {
            return Err(Error::Dataset("unlabeled block row mismatch".into()));
        }
        if self.unlabeled_x.ncols() != self.labeled_x.ncols() {
            return Err(Error::Dataset(
                "labeled and unlabeled covariate widths differ".into(),
            ));
        }
        let finite = self.labeled_y.iter().all(|v| v.is_finite())
            && self.labeled_x.iter().all(|v| v.is_finite())
            && self.labeled_ytilde.iter().all(|v| v.is_finite())
            && self.unlabeled_x.iter().all(|v| v.is_finite())
            && self.unlabeled_ytilde.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Dataset("non-finite value in dataset".into()));
        }
        Ok(())
    }

    /// Prediction and covariates of pooled row `i` (labeled rows first).
    pub fn pooled_row(&self, i: usize) -> (f64, DVector<f64>) {
        let n = self.n();
        if i < n {
            (self.labeled_ytilde[i], self.labeled_x.row(i).transpose())
        } else {
            let j = i - n;
            (self.unlabeled_ytilde[j], self.unlabeled_x.row(j).transpose())
        }
    }
}

/// Everything needed to run a fit: model, auxiliary design, level, seed,
/// solver controls.
#[derive(Debug, Clone)]
pub struct ProblemConfig {
    pub model: MomentModel,
    pub aux: crate::auxiliary::AuxSpec,
    pub alpha: f64,
    pub seed: u64,
    pub controls: SolverControls,
}

impl ProblemConfig {
    pub fn new(model: MomentModel, aux: crate::auxiliary::AuxSpec) -> Self {
        Self {
            model,
            aux,
            alpha: 0.05,
            seed: 0,
            controls: SolverControls::default(),
        }
    }
}
