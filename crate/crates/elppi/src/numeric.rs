//! Shared numerical helpers: moment matrices, guarded symmetric linear
//! algebra, and deterministic RNG substreams.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff used when pseudo-inverting possibly singular
/// covariance matrices: eigenvalues below `PSD_REL_TOL * lambda_max` are
/// treated as zero.
pub const PSD_REL_TOL: f64 = 1e-10;

/// Condition-number proxy threshold beyond which Newton systems get
/// Tikhonov damping.
pub const COND_LIMIT: f64 = 1e12;

/// Relative standard-deviation floor below which a data column counts as
/// constant. Shared by the constraint solver and the auxiliary builder so
/// both agree on what "degenerate" means.
pub const DEGENERATE_REL_SD: f64 = 1e-12;

/// Column means of an observation matrix (rows are observations).
pub fn col_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    assert!(n > 0, "col_means of empty matrix");
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n as f64)
}

/// Covariance of the rows of `a`, centered at the sample mean, divisor `n`.
pub fn covariance(a: &DMatrix<f64>) -> DMatrix<f64> {
    cross_covariance(a, a)
}

/// Cross-covariance of rows of `a` against rows of `b` (divisor `n`,
/// both sides centered at their sample means). Result is `a.ncols() x b.ncols()`.
pub fn cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, b.nrows(), "cross_covariance: row mismatch");
    assert!(n > 0);
    let ma = col_means(a);
    let mb = col_means(b);
    let mut ac = a.clone();
    let mut bc = b.clone();
    for i in 0..n {
        for j in 0..a.ncols() {
            ac[(i, j)] -= ma[j];
        }
        for j in 0..b.ncols() {
            bc[(i, j)] -= mb[j];
        }
    }
    ac.transpose() * bc / n as f64
}

/// Uncentered cross moment `mean(a_i b_i^T)`.
pub fn cross_moment(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, b.nrows(), "cross_moment: row mismatch");
    assert!(n > 0);
    a.transpose() * b / n as f64
}

/// Forces exact symmetry; eigen routines assume it.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix. Returns (eigenvalues, eigenvectors).
fn sym_eig(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let se = symmetrize(m).symmetric_eigen();
    (se.eigenvalues, se.eigenvectors)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eig(m);
    vals.min()
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix with relative
/// eigenvalue truncation. Returns the pseudo-inverse and the retained rank.
pub fn psd_pinv(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let (vals, vecs) = sym_eig(m);
    let lmax = vals.iter().cloned().fold(0.0_f64, f64::max);
    let cut = rel_tol * lmax.max(f64::MIN_POSITIVE);
    let mut rank = 0;
    let inv_vals = DVector::from_fn(vals.len(), |i, _| {
        if vals[i] > cut {
            rank += 1;
            1.0 / vals[i]
        } else {
            0.0
        }
    });
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..vals.len() {
        if inv_vals[i] != 0.0 {
            let v = vecs.column(i);
            out += v * v.transpose() * inv_vals[i];
        }
    }
    (out, rank)
}

/// Symmetric PSD square root with the same truncation rule as [`psd_pinv`].
pub fn psd_sqrt(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    psd_power(m, rel_tol, 0.5)
}

/// Symmetric PSD inverse square root (pseudo-inverse on the retained span).
pub fn psd_inv_sqrt(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    psd_power(m, rel_tol, -0.5)
}

fn psd_power(m: &DMatrix<f64>, rel_tol: f64, pow: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eig(m);
    let lmax = vals.iter().cloned().fold(0.0_f64, f64::max);
    let cut = rel_tol * lmax.max(f64::MIN_POSITIVE);
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..vals.len() {
        if vals[i] > cut {
            let v = vecs.column(i);
            out += v * v.transpose() * vals[i].powf(pow);
        }
    }
    out
}

/// Solves the symmetric positive-definite system `h x = rhs` by Cholesky,
/// adding Tikhonov damping `1e-10 * trace(h)/d` (escalating tenfold as
/// needed) when the factorization fails or looks worse-conditioned than
/// [`COND_LIMIT`].
pub fn solve_spd_damped(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let d = h.nrows();
    assert_eq!(d, rhs.len());
    if let Some(chol) = symmetrize(h).cholesky() {
        let l = chol.l();
        let mut dmin = f64::INFINITY;
        let mut dmax = 0.0_f64;
        for i in 0..d {
            dmin = dmin.min(l[(i, i)]);
            dmax = dmax.max(l[(i, i)]);
        }
        // (dmax/dmin)^2 under-estimates the true condition number but is
        // free; it only decides whether to pay for damping.
        if dmin > 0.0 && (dmax / dmin).powi(2) <= COND_LIMIT {
            return Ok(chol.solve(rhs));
        }
    }
    let trace: f64 = (0..d).map(|i| h[(i, i)]).sum();
    let base = 1e-10 * (trace.abs() / d as f64).max(f64::MIN_POSITIVE);
    let mut lambda = base;
    for _ in 0..12 {
        let mut damped = symmetrize(h);
        for i in 0..d {
            damped[(i, i)] += lambda;
        }
        if let Some(chol) = damped.cholesky() {
            return Ok(chol.solve(rhs));
        }
        lambda *= 10.0;
    }
    Err(Error::Numerical(
        "damped Cholesky failed; system is badly indefinite".into(),
    ))
}

/// Deterministic per-replication RNG: one base seed, one substream per
/// replication. Streams are independent and do not depend on worker count.
pub fn rep_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_add(1));
    rng
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Chi-squared quantile with `df` degrees of freedom.
pub fn chi2_quantile(p: f64, df: f64) -> f64 {
    ChiSquared::new(df).unwrap().inverse_cdf(p)
}
