//! Exact minimizers of the spectral loss.
//!
//! The loss is a matrix-factorization objective, so its minimum over rank-d
//! representations comes straight from the top eigenpairs of A_norm, and the
//! minimum within a linear function class comes from the same problem
//! projected onto the span of the normalized features. No iteration, no
//! tolerance tuning: one symmetric eigendecomposition each.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::{spectral_loss_exact, RepMatrix};
use crate::spectral::SpectralGraph;

// ============================================================================
// Types
// ============================================================================

/// Features tabulated on augmentations: row x is phi(x). A linear class is
/// every representation of the form f(x) = W^T phi(x).
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "feature matrix needs at least one column".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature matrix has non-finite entries".into(),
            ));
        }
        Ok(FeatureMatrix { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// D^{1/2} Phi: row x scaled by sqrt of the augmentation marginal.
    pub fn normalized(&self, aug_marginal: &[f64]) -> DMatrix<f64> {
        assert_eq!(aug_marginal.len(), self.values.nrows());
        let mut out = self.values.clone();
        for (i, &w) in aug_marginal.iter().enumerate() {
            let r = w.sqrt();
            for j in 0..out.ncols() {
                out[(i, j)] *= r;
            }
        }
        out
    }
}

/// An exact minimizer together with the spectrum that produced it.
#[derive(Debug, Clone)]
pub struct SpectralSolution {
    /// The minimizing representation (rows on augmentations).
    pub f_opt: RepMatrix,
    /// Weights expressing f_opt = Phi W when solved within a linear class.
    pub w_opt: Option<DMatrix<f64>>,
    /// Loss value attained by f_opt.
    pub min_loss: f64,
    /// Normalized-space directions spanning the solution, one column per dim.
    pub basis: DMatrix<f64>,
    /// The top-d spectrum values used for scaling, negatives clipped to 0.
    pub spectrum_used: Vec<f64>,
}

// ============================================================================
// Operations
// ============================================================================

/// Minimize over all rank-d representations: scale the top d eigenvectors of
/// A_norm by the square roots of their eigenvalues. Negative eigenvalues are
/// numerical noise (A_norm is a Gram matrix) and clip to zero; the minimum
/// is -(sum of the top d clipped eigenvalues squared).
pub fn optimal_unconstrained(graph: &SpectralGraph, d: usize) -> Result<SpectralSolution> {
    let m = graph.n_augs();
    if d == 0 || d > m {
        return Err(Error::InvalidArgument(format!(
            "dimension d={d} outside 1..={m}"
        )));
    }
    let basis = graph.anorm_eigvecs().columns(0, d).into_owned();
    let spectrum_used: Vec<f64> = graph.anorm_eigs()[..d]
        .iter()
        .map(|&g| g.max(0.0))
        .collect();
    let mut fn_mat = basis.clone();
    for (j, &g) in spectrum_used.iter().enumerate() {
        let s = g.sqrt();
        for i in 0..m {
            fn_mat[(i, j)] *= s;
        }
    }
    let f_opt = denormalize(&fn_mat, graph.aug_marginal())?;
    let min_loss = -spectrum_used.iter().map(|g| g * g).sum::<f64>();
    Ok(SpectralSolution { f_opt, w_opt: None, min_loss, basis, spectrum_used })
}

/// Minimize within the linear class spanned by `phi`: solve the eigenproblem
/// of A_norm compressed onto an orthonormal basis of the normalized feature
/// span, then lift back and recover W by least squares. Requesting more
/// dimensions than the span affords pads zero columns.
pub fn optimal_in_linear_class(
    graph: &SpectralGraph,
    phi: &FeatureMatrix,
    d: usize,
) -> Result<SpectralSolution> {
    let m = graph.n_augs();
    if phi.n_rows() != m {
        return Err(Error::DimensionMismatch(format!(
            "features have {} rows, graph has {m} augmentations",
            phi.n_rows()
        )));
    }
    if d == 0 || d > m {
        return Err(Error::InvalidArgument(format!(
            "dimension d={d} outside 1..={m}"
        )));
    }
    let phin = phi.normalized(graph.aug_marginal());
    let span = linalg::orthonormal_range_basis(&phin);
    let r = span.ncols();

    let (fn_mat, basis, spectrum_used) = if r == 0 {
        // Degenerate class: only the zero representation.
        (DMatrix::zeros(m, d), DMatrix::zeros(m, d), vec![0.0; d])
    } else {
        // r x r compression of A_norm onto the span.
        let compressed = span.transpose() * graph.anorm() * &span;
        let (mut evals, evecs) = linalg::symmetric_eigen_desc(&compressed);
        let keep = d.min(r);
        evals.truncate(keep);
        let mut spectrum: Vec<f64> = evals.iter().map(|&g| g.max(0.0)).collect();
        let mut basis = DMatrix::zeros(m, d);
        let lifted = &span * evecs.columns(0, keep);
        basis.view_mut((0, 0), (m, keep)).copy_from(&lifted);
        let mut fn_mat = basis.clone();
        for (j, &g) in spectrum.iter().enumerate() {
            let s = g.sqrt();
            for i in 0..m {
                fn_mat[(i, j)] *= s;
            }
        }
        spectrum.resize(d, 0.0);
        (fn_mat, basis, spectrum)
    };

    let w_opt = linalg::lstsq_matrix(&phin, &fn_mat);
    let f_opt = denormalize(&fn_mat, graph.aug_marginal())?;
    // Evaluating directly keeps the reported minimum honest even when the
    // span discards part of the spectrum.
    let min_loss = spectral_loss_exact(graph, &f_opt)?;
    Ok(SpectralSolution { f_opt, w_opt: Some(w_opt), min_loss, basis, spectrum_used })
}

/// Excess loss over the best representation of the same rank.
#[derive(Debug, Clone, Copy)]
pub struct Suboptimality {
    pub epsilon: f64,
    /// Set when the candidate was not in the class span and had to be
    /// projected before evaluation.
    pub projected: bool,
}

/// Relative residual above which a candidate counts as outside the span.
const SPAN_TOL: f64 = 1e-6;

/// Loss of `f` minus the in-class (or unconstrained) minimum at the same
/// dimension. Candidates outside the feature span are projected onto it
/// first and flagged.
pub fn suboptimality(
    graph: &SpectralGraph,
    f: &RepMatrix,
    phi: Option<&FeatureMatrix>,
) -> Result<Suboptimality> {
    let d = f.dim_d();
    match phi {
        None => {
            let best = optimal_unconstrained(graph, d)?;
            let eps = spectral_loss_exact(graph, f)? - best.min_loss;
            Ok(Suboptimality { epsilon: eps, projected: false })
        }
        Some(phi) => {
            let best = optimal_in_linear_class(graph, phi, d)?;
            let phin = phi.normalized(graph.aug_marginal());
            let span = linalg::orthonormal_range_basis(&phin);
            let fn_mat = f.normalized(graph.aug_marginal());
            let in_span = if span.ncols() == 0 {
                DMatrix::zeros(fn_mat.nrows(), fn_mat.ncols())
            } else {
                &span * (span.transpose() * &fn_mat)
            };
            let resid = linalg::fro_diff(&fn_mat, &in_span);
            let scale = fn_mat.norm().max(1.0);
            let projected = resid > SPAN_TOL * scale;
            let candidate = if projected {
                denormalize(&in_span, graph.aug_marginal())?
            } else {
                f.clone()
            };
            let eps = spectral_loss_exact(graph, &candidate)? - best.min_loss;
            Ok(Suboptimality { epsilon: eps, projected })
        }
    }
}

/// Singular value decomposition of the cross matrix P_span Abar_norm^T,
/// values descending. The squared values coincide with the spectrum of
/// A_norm compressed onto the feature span.
pub fn projected_svd(
    graph: &SpectralGraph,
    phi: &FeatureMatrix,
) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    if phi.n_rows() != graph.n_augs() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} rows, graph has {} augmentations",
            phi.n_rows(),
            graph.n_augs()
        )));
    }
    let phin = phi.normalized(graph.aug_marginal());
    let span = linalg::orthonormal_range_basis(&phin);
    let target = if span.ncols() == 0 {
        DMatrix::zeros(graph.n_augs(), graph.n_inputs())
    } else {
        &span * (span.transpose() * graph.abar_norm().transpose())
    };
    let svd = target.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let s: Vec<f64> = svd.singular_values.iter().cloned().collect();
    Ok((u, s, v_t.transpose()))
}

fn denormalize(fn_mat: &DMatrix<f64>, aug_marginal: &[f64]) -> Result<RepMatrix> {
    let mut vals = fn_mat.clone();
    for (i, &w) in aug_marginal.iter().enumerate() {
        let r = 1.0 / w.sqrt();
        for j in 0..vals.ncols() {
            vals[(i, j)] *= r;
        }
    }
    RepMatrix::new(vals)
}

// ============================================================================
// Tests
// ============================================================================
