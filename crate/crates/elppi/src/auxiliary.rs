//! Auxiliary constraint construction.
//!
//! Predictions enter the analysis only through auxiliary functions
//! `h(y_tilde, x)` whose pooled mean over the labeled and unlabeled samples
//! is imposed as an extra zero-mean constraint. Two constructions are
//! provided: fixed polynomial bases, and K-fold cross-fitted learners that
//! approximate the conditional mean of the supervised score (or of
//! threshold indicators, for distribution learning) given `(y_tilde, x)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MomentModel, PPIDataset};
use crate::numeric::{col_means, rep_rng, DEGENERATE_REL_SD};

/// Default fold count for cross-fitting.
pub const DEFAULT_FOLDS: usize = 5;

fn default_degree() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn default_ridge_degree() -> usize {
    2
}

/// How the auxiliary block is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxSpec {
    /// No auxiliary constraints; the analysis is purely supervised.
    None,
    /// All monomials of `(y_tilde, x1..xd)` of total degree `1..=degree`,
    /// centered at the pooled sample mean. Without interactions only pure
    /// powers of single variables are kept.
    FixedBasis {
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default = "default_true")]
        include_interactions: bool,
    },
    /// K-fold cross-fitted learned auxiliary.
    Crossfit {
        #[serde(default = "default_folds")]
        k: usize,
        #[serde(default)]
        learner: LearnerSpec,
        #[serde(default)]
        targets: CrossfitTargets,
    },
}

impl Default for AuxSpec {
    fn default() -> Self {
        AuxSpec::FixedBasis {
            degree: 1,
            include_interactions: true,
        }
    }
}

/// What the cross-fitted learner approximates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossfitTargets {
    /// The components of the supervised score at a pilot estimate.
    #[default]
    Score,
    /// Threshold indicators `I(y <= grid_j)`, one auxiliary column per
    /// grid point.
    Indicators { grid: Vec<f64> },
}

/// Built-in deterministic learners for cross-fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum LearnerSpec {
    /// Ridge regression on polynomial features of `(y_tilde, x)` with an
    /// unpenalized intercept. `lambda` defaults to `1e-3 * n_train`.
    RidgePoly {
        #[serde(default = "default_ridge_degree")]
        degree: usize,
        #[serde(default)]
        lambda: Option<f64>,
    },
    /// k-nearest-neighbour averaging. `k` defaults to
    /// `max(5, ceil(n^0.6) / folds)`.
    Knn {
        #[serde(default)]
        k: Option<usize>,
    },
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::RidgePoly {
            degree: default_ridge_degree(),
            lambda: None,
        }
    }
}

/// Centered auxiliary block for the labeled sample, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxMatrix {
    /// Centered auxiliary values, one row per labeled observation (n x r).
    pub hc: DMatrix<f64>,
    /// Raw column indices removed by the degeneracy filter.
    pub dropped_columns: Vec<usize>,
    /// Fold label per labeled observation; `None` marks a trimmed row.
    /// Present only for cross-fitted auxiliaries.
    pub fold_assignment: Option<Vec<Option<usize>>>,
    /// Fold label per unlabeled observation, same conventions.
    pub unlabeled_fold_assignment: Option<Vec<Option<usize>>>,
    /// Subtracted means over the raw (pre-drop) columns: a single row for
    /// pooled centering, one row per fold for cross-fitting.
    pub pooled_means: DMatrix<f64>,
    /// Non-fatal notes: degeneracy fallbacks, fold trimming.
    pub warnings: Vec<String>,
}

impl AuxMatrix {
    /// Auxiliary dimension after degeneracy filtering.
    pub fn r(&self) -> usize {
        self.hc.ncols()
    }

    /// The empty auxiliary block (supervised analysis).
    pub fn empty(n: usize) -> Self {
        AuxMatrix {
            hc: DMatrix::zeros(n, 0),
            dropped_columns: Vec::new(),
            fold_assignment: None,
            unlabeled_fold_assignment: None,
            pooled_means: DMatrix::zeros(1, 0),
            warnings: Vec::new(),
        }
    }
}

/// Builds the auxiliary block described by `spec`. Cross-fitted score
/// targets need a pilot estimate (the supervised fit); other kinds ignore
/// `theta_pilot`.
pub fn build_aux(
    dataset: &PPIDataset,
    model: &MomentModel,
    spec: &AuxSpec,
    theta_pilot: Option<&DVector<f64>>,
    seed: u64,
) -> Result<AuxMatrix> {
    match spec {
        AuxSpec::None => Ok(AuxMatrix::empty(dataset.n())),
        AuxSpec::FixedBasis {
            degree,
            include_interactions,
        } => {
            if *degree < 1 {
                return Err(Error::InvalidArgument(
                    "basis degree must be at least 1".into(),
                ));
            }
            let raw = build_basis(dataset, *degree, *include_interactions);
            center_pooled(&raw, dataset.n())
        }
        AuxSpec::Crossfit { k, learner, targets } => match targets {
            CrossfitTargets::Score => {
                let pilot = theta_pilot.ok_or_else(|| {
                    Error::InvalidArgument(
                        "cross-fitted score targets need a pilot estimate".into(),
                    )
                })?;
                crossfit_aux(dataset, model, pilot, learner, *k, seed)
            }
            CrossfitTargets::Indicators { grid } => {
                indicator_targets(dataset, grid, learner, *k, seed)
            }
        },
    }
}

/// Exponent vectors for all monomials in `nv` variables of total degree
/// `1..=degree`, ordered by (total degree, descending lexicographic
/// exponents), so the first variable's powers lead within each degree.
fn monomial_exponents(nv: usize, degree: usize, include_interactions: bool) -> Vec<Vec<u32>> {
    fn compositions(total: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if parts == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=total).rev() {
            prefix.push(e);
            compositions(total - e, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for t in 1..=degree as u32 {
        let mut level = Vec::new();
        compositions(t, nv, &mut Vec::new(), &mut level);
        if !include_interactions {
            level.retain(|e| e.iter().filter(|&&v| v > 0).count() == 1);
        }
        out.extend(level);
    }
    out
}

fn monomial_row(values: &[f64], exponents: &[Vec<u32>], out_row: &mut [f64]) {
    for (j, e) in exponents.iter().enumerate() {
        let mut v = 1.0;
        for (val, &p) in values.iter().zip(e.iter()) {
            if p > 0 {
                v *= val.powi(p as i32);
            }
        }
        out_row[j] = v;
    }
}

/// Raw (uncentered) polynomial basis values of `(y_tilde, x)` over all
/// `n + m` pooled rows, labeled rows first. With interactions the column
/// count is `C(d+1+degree, degree) - 1`.
pub fn build_basis(dataset: &PPIDataset, degree: usize, include_interactions: bool) -> DMatrix<f64> {
    let d = dataset.d();
    let exps = monomial_exponents(d + 1, degree, include_interactions);
    let nm = dataset.n() + dataset.m();
    let mut raw = DMatrix::zeros(nm, exps.len());
    let mut vals = vec![0.0; d + 1];
    let mut row = vec![0.0; exps.len()];
    for i in 0..nm {
        let (yt, x) = dataset.pooled_row(i);
        vals[0] = yt;
        for j in 0..d {
            vals[j + 1] = x[j];
        }
        monomial_row(&vals, &exps, &mut row);
        for (j, v) in row.iter().enumerate() {
            raw[(i, j)] = *v;
        }
    }
    raw
}

/// Columns of `m` that are constant relative to their own scale.
fn degenerate_columns(m: &DMatrix<f64>) -> Vec<usize> {
    let n = m.nrows() as f64;
    let mut out = Vec::new();
    for j in 0..m.ncols() {
        let col = m.column(j);
        let scale = col.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if sd <= DEGENERATE_REL_SD * scale {
            out.push(j);
        }
    }
    out
}

fn keep_columns(m: &DMatrix<f64>, rows: usize, dropped: &[usize]) -> DMatrix<f64> {
    let kept: Vec<usize> = (0..m.ncols()).filter(|j| !dropped.contains(j)).collect();
    let mut out = DMatrix::zeros(rows, kept.len());
    for (jj, &j) in kept.iter().enumerate() {
        for i in 0..rows {
            out[(i, jj)] = m[(i, j)];
        }
    }
    out
}

/// Centers raw basis values (over all `n + m` rows, labeled first) at the
/// pooled column means and keeps the labeled rows. Constant columns are
/// dropped; when every column is constant the result has `r = 0` and a
/// warning, and callers fall back to the supervised path.
pub fn center_pooled(raw: &DMatrix<f64>, n: usize) -> Result<AuxMatrix> {
    let nm = raw.nrows();
    if n == 0 || n > nm {
        return Err(Error::InvalidArgument(format!(
            "labeled count {n} incompatible with {nm} pooled rows"
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "non-finite auxiliary basis value".into(),
        ));
    }
    let means = col_means(raw);
    let dropped = degenerate_columns(raw);
    let mut centered = raw.rows(0, n).into_owned();
    for i in 0..n {
        for j in 0..raw.ncols() {
            centered[(i, j)] -= means[j];
        }
    }
    let hc = keep_columns(&centered, n, &dropped);
    let mut warnings = Vec::new();
    if hc.ncols() == 0 && raw.ncols() > 0 {
        warnings.push("all auxiliary columns are degenerate; supervised fallback".into());
    }
    Ok(AuxMatrix {
        hc,
        dropped_columns: dropped,
        fold_assignment: None,
        unlabeled_fold_assignment: None,
        pooled_means: DMatrix::from_fn(1, raw.ncols(), |_, j| means[j]),
        warnings,
    })
}

/// A learner fitted on one fold's complement.
pub(crate) enum FittedLearner {
    Ridge {
        exponents: Vec<Vec<u32>>,
        feature_means: DVector<f64>,
        coef: DMatrix<f64>,
        intercept: DVector<f64>,
    },
    Knn {
        feats: DMatrix<f64>,
        resps: DMatrix<f64>,
        k: usize,
    },
}

/// Default neighbour count: `max(5, ceil(n^0.6) / folds)`, capped at the
/// training size.
fn knn_default_k(n_labeled: usize, folds: usize, n_train: usize) -> usize {
    let c = (n_labeled as f64).powf(0.6).ceil() as usize;
    (c / folds).max(5).min(n_train.max(1))
}

pub(crate) fn fit_learner(
    spec: &LearnerSpec,
    feats: &DMatrix<f64>,
    resps: &DMatrix<f64>,
    n_labeled: usize,
    folds: usize,
) -> Result<FittedLearner> {
    let n_train = feats.nrows();
    if n_train == 0 {
        return Err(Error::InvalidArgument("empty training fold".into()));
    }
    match spec {
        LearnerSpec::RidgePoly { degree, lambda } => {
            if *degree < 1 {
                return Err(Error::InvalidArgument(
                    "ridge_poly degree must be at least 1".into(),
                ));
            }
            let exponents = monomial_exponents(feats.ncols(), *degree, true);
            let nf = exponents.len();
            let mut phi = DMatrix::zeros(n_train, nf);
            let mut vals = vec![0.0; feats.ncols()];
            let mut row = vec![0.0; nf];
            for i in 0..n_train {
                for j in 0..feats.ncols() {
                    vals[j] = feats[(i, j)];
                }
                monomial_row(&vals, &exponents, &mut row);
                for (j, v) in row.iter().enumerate() {
                    phi[(i, j)] = *v;
                }
            }
            let feature_means = col_means(&phi);
            for i in 0..n_train {
                for j in 0..nf {
                    phi[(i, j)] -= feature_means[j];
                }
            }
            let resp_means = col_means(resps);
            let mut rc = resps.clone();
            for i in 0..n_train {
                for j in 0..resps.ncols() {
                    rc[(i, j)] -= resp_means[j];
                }
            }
            let lam = lambda.unwrap_or(1e-3 * n_train as f64);
            if !(lam > 0.0) {
                return Err(Error::InvalidArgument(
                    "ridge penalty must be positive".into(),
                ));
            }
            let mut gram = phi.transpose() * &phi;
            for j in 0..nf {
                gram[(j, j)] += lam;
            }
            let chol = gram
                .cholesky()
                .ok_or_else(|| Error::Numerical("ridge normal equations not PD".into()))?;
            let coef = chol.solve(&(phi.transpose() * rc));
            Ok(FittedLearner::Ridge {
                exponents,
                feature_means,
                coef,
                intercept: resp_means,
            })
        }
        LearnerSpec::Knn { k } => {
            let kk = k
                .unwrap_or_else(|| knn_default_k(n_labeled, folds, n_train))
                .min(n_train);
            if kk == 0 {
                return Err(Error::InvalidArgument("knn needs k >= 1".into()));
            }
            Ok(FittedLearner::Knn {
                feats: feats.clone(),
                resps: resps.clone(),
                k: kk,
            })
        }
    }
}

impl FittedLearner {
    /// Predicted responses for each row of `feats`.
    pub(crate) fn predict(&self, feats: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            FittedLearner::Ridge {
                exponents,
                feature_means,
                coef,
                intercept,
            } => {
                let n = feats.nrows();
                let mut out = DMatrix::zeros(n, coef.ncols());
                let mut vals = vec![0.0; feats.ncols()];
                let mut row = vec![0.0; exponents.len()];
                for i in 0..n {
                    for j in 0..feats.ncols() {
                        vals[j] = feats[(i, j)];
                    }
                    monomial_row(&vals, exponents, &mut row);
                    for jr in 0..coef.ncols() {
                        let mut v = intercept[jr];
                        for (jf, phi) in row.iter().enumerate() {
                            v += (phi - feature_means[jf]) * coef[(jf, jr)];
                        }
                        out[(i, jr)] = v;
                    }
                }
                out
            }
            FittedLearner::Knn { feats: tr, resps, k } => {
                let n = feats.nrows();
                let mut out = DMatrix::zeros(n, resps.ncols());
                let mut dist: Vec<(f64, usize)> = Vec::with_capacity(tr.nrows());
                for i in 0..n {
                    dist.clear();
                    for t in 0..tr.nrows() {
                        let mut d2 = 0.0;
                        for j in 0..feats.ncols() {
                            let diff = feats[(i, j)] - tr[(t, j)];
                            d2 += diff * diff;
                        }
                        dist.push((d2, t));
                    }
                    // Ties broken by training index so predictions are
                    // deterministic.
                    let kk = (*k).min(dist.len());
                    dist.select_nth_unstable_by(kk - 1, |a, b| {
                        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
                    });
                    dist[..kk].sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                    for jr in 0..resps.ncols() {
                        let mut acc = 0.0;
                        for &(_, t) in &dist[..kk] {
                            acc += resps[(t, jr)];
                        }
                        out[(i, jr)] = acc / kk as f64;
                    }
                }
                out
            }
        }
    }
}

/// Shuffles `0..count` and assigns the first `k * (count / k)` indices to
/// folds in chunks; the remainder stays unassigned (trimmed).
fn assign_folds(
    count: usize,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<Option<usize>>, usize) {
    let per = count / k;
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(rng);
    let mut fold = vec![None; count];
    for (pos, &i) in idx.iter().take(per * k).enumerate() {
        fold[i] = Some(pos / per.max(1));
    }
    (fold, per)
}

fn learner_features(dataset: &PPIDataset) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m, d) = (dataset.n(), dataset.m(), dataset.d());
    let mut lf = DMatrix::zeros(n, d + 1);
    for i in 0..n {
        lf[(i, 0)] = dataset.labeled_ytilde[i];
        for j in 0..d {
            lf[(i, j + 1)] = dataset.labeled_x[(i, j)];
        }
    }
    let mut uf = DMatrix::zeros(m, d + 1);
    for i in 0..m {
        uf[(i, 0)] = dataset.unlabeled_ytilde[i];
        for j in 0..d {
            uf[(i, j + 1)] = dataset.unlabeled_x[(i, j)];
        }
    }
    (lf, uf)
}

fn rows_of(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (ii, &i) in rows.iter().enumerate() {
        for j in 0..m.ncols() {
            out[(ii, j)] = m[(i, j)];
        }
    }
    out
}

/// Cross-fitting core shared by score and indicator targets. `responses`
/// holds one row per labeled observation. Fold assignment is uniform at
/// random given `seed`; fold `k` rows are predicted by a learner that never
/// saw them, then centered at the fold's pooled (labeled + unlabeled) mean.
/// Trimmed labeled rows get zero auxiliary rows and no fold label.
fn crossfit_with_responses(
    dataset: &PPIDataset,
    responses: &DMatrix<f64>,
    learner: &LearnerSpec,
    k: usize,
    seed: u64,
) -> Result<AuxMatrix> {
    let n = dataset.n();
    let m = dataset.m();
    if k < 2 {
        return Err(Error::InvalidArgument("cross-fitting needs k >= 2".into()));
    }
    if n < 2 * k {
        return Err(Error::InvalidArgument(format!(
            "cross-fitting with k={k} folds needs at least {} labeled rows, got {n}",
            2 * k
        )));
    }
    assert_eq!(responses.nrows(), n, "crossfit: response row mismatch");
    let r = responses.ncols();

    let mut rng = rep_rng(seed, 0);
    let (fold_lab, per_n) = assign_folds(n, k, &mut rng);
    let (fold_unl, per_m) = assign_folds(m, k, &mut rng);
    let mut warnings = Vec::new();
    let trimmed = (n - per_n * k) + (m - per_m * k);
    if trimmed > 0 {
        warnings.push(format!(
            "trimmed {trimmed} row(s) so {k} folds divide both samples"
        ));
    }

    let (lab_feats, unl_feats) = learner_features(dataset);
    let mut hc = DMatrix::zeros(n, r);
    let mut pooled_means = DMatrix::zeros(k, r);

    for fold in 0..k {
        let train: Vec<usize> = (0..n)
            .filter(|i| matches!(fold_lab[*i], Some(f) if f != fold))
            .collect();
        let eval_lab: Vec<usize> = (0..n).filter(|i| fold_lab[*i] == Some(fold)).collect();
        let eval_unl: Vec<usize> = (0..m).filter(|i| fold_unl[*i] == Some(fold)).collect();

        let fitted = fit_learner(
            learner,
            &rows_of(&lab_feats, &train),
            &rows_of(responses, &train),
            n,
            k,
        )
        .map_err(|e| Error::Numerical(format!("learner failed on fold {fold}: {e}")))?;

        let pred_lab = fitted.predict(&rows_of(&lab_feats, &eval_lab));
        let pred_unl = fitted.predict(&rows_of(&unl_feats, &eval_unl));
        if pred_lab.iter().chain(pred_unl.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite learner prediction on fold {fold}"
            )));
        }

        let count = (eval_lab.len() + eval_unl.len()) as f64;
        for j in 0..r {
            let s = pred_lab.column(j).sum() + pred_unl.column(j).sum();
            pooled_means[(fold, j)] = s / count;
        }
        for (ii, &i) in eval_lab.iter().enumerate() {
            for j in 0..r {
                hc[(i, j)] = pred_lab[(ii, j)] - pooled_means[(fold, j)];
            }
        }
    }

    let dropped = degenerate_columns(&hc);
    let hc = keep_columns(&hc, n, &dropped);
    if hc.ncols() == 0 && r > 0 {
        warnings.push("all auxiliary columns are degenerate; supervised fallback".into());
    }
    Ok(AuxMatrix {
        hc,
        dropped_columns: dropped,
        fold_assignment: Some(fold_lab),
        unlabeled_fold_assignment: Some(fold_unl),
        pooled_means,
        warnings,
    })
}

/// Cross-fitted approximation of the conditional supervised score: the
/// learner regresses each component of `g(theta_pilot; y, x)` on
/// `(y_tilde, x)`. The auxiliary dimension equals the score dimension.
pub fn crossfit_aux(
    dataset: &PPIDataset,
    model: &MomentModel,
    theta_pilot: &DVector<f64>,
    learner: &LearnerSpec,
    k: usize,
    seed: u64,
) -> Result<AuxMatrix> {
    if theta_pilot.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("pilot estimate not finite".into()));
    }
    let responses = model.g_matrix(theta_pilot, &dataset.labeled_y, &dataset.labeled_x);
    crossfit_with_responses(dataset, &responses, learner, k, seed)
}

/// Cross-fitted conditional CDF targets: responses are `I(y_i <= grid_j)`
/// per grid point, so the auxiliary dimension equals the grid length.
pub fn indicator_targets(
    dataset: &PPIDataset,
    grid: &[f64],
    learner: &LearnerSpec,
    k: usize,
    seed: u64,
) -> Result<AuxMatrix> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty indicator grid".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "indicator grid must be strictly increasing".into(),
        ));
    }
    let n = dataset.n();
    let responses = DMatrix::from_fn(n, grid.len(), |i, j| {
        if dataset.labeled_y[i] <= grid[j] {
            1.0
        } else {
            0.0
        }
    });
    crossfit_with_responses(dataset, &responses, learner, k, seed)
}
