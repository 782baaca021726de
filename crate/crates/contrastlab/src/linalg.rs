//! Small dense linear-algebra helpers shared across the crate.
//!
//! Everything here wraps nalgebra decompositions with the conventions the
//! rest of the crate relies on: symmetric eigenpairs sorted, rank decisions
//! made against a relative singular-value cutoff, and least squares solved
//! through the SVD so rank-deficient designs are handled by the
//! pseudoinverse rather than by an error.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
///
/// nalgebra's symmetric solver returns pairs in no particular order; we sort
/// here so callers can index the spectrum directly.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "symmetric_eigen_desc needs a square matrix");
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Orthonormal basis for the column space of `m`.
///
/// Columns of the result are the left singular vectors whose singular value
/// exceeds `RANK_CUTOFF` times the largest one. A zero matrix yields a
/// matrix with zero columns.
pub fn orthonormal_range_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("svd requested u");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_CUTOFF * smax && s > 0.0)
        .count();
    u.columns(0, rank).into_owned()
}

/// Minimum-norm least squares solution of `a x = b` via the pseudoinverse.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let vt = svd.v_t.as_ref().expect("svd requested v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let mut coeff = DVector::zeros(svd.singular_values.len());
    let utb = u.transpose() * b;
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > RANK_CUTOFF * smax && s > 0.0 {
            coeff[i] = utb[i] / s;
        }
    }
    vt.transpose() * coeff
}

/// Minimum-norm least squares with a matrix right-hand side: one SVD of `a`
/// shared across all columns of `b`.
pub fn lstsq_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "row mismatch in lstsq_matrix");
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let vt = svd.v_t.as_ref().expect("svd requested v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let mut utb = u.transpose() * b;
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        let inv = if s > RANK_CUTOFF * smax && s > 0.0 { 1.0 / s } else { 0.0 };
        for j in 0..utb.ncols() {
            utb[(i, j)] *= inv;
        }
    }
    vt.transpose() * utb
}

/// Weighted least squares: minimizes sum_i w_i (x_i . beta - y_i)^2.
///
/// Implemented by scaling rows with sqrt(w_i) and solving the plain problem;
/// weights must be nonnegative.
pub fn weighted_lstsq(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> DVector<f64> {
    assert_eq!(x.nrows(), y.len(), "design and target row mismatch");
    assert_eq!(x.nrows(), w.len(), "design and weight row mismatch");
    let mut xs = x.clone();
    let mut ys = y.clone();
    for i in 0..w.len() {
        assert!(w[i] >= 0.0, "weights must be nonnegative");
        let r = w[i].sqrt();
        for j in 0..xs.ncols() {
            xs[(i, j)] *= r;
        }
        ys[i] *= r;
    }
    lstsq(&xs, &ys)
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in max_abs_diff");
    let mut worst = 0.0_f64;
    for (x, y) in a.iter().zip(b.iter()) {
        worst = worst.max((x - y).abs());
    }
    worst
}

/// Frobenius norm of `a - b`.
pub fn fro_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in fro_diff");
    (a - b).norm()
}
