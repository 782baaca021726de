//! Distribution matrices and spectra of an augmentation model.
//!
//! The bipartite input/augmentation structure induces a family of matrices:
//! the joint Abar (N x M), its normalized form Abar_norm, the
//! augmentation-side adjacency A = Abar^T Dbar^{-1} Abar and its normalized
//! form A_norm, and the Laplacian I - A_norm. Everything in this module is
//! dense; target sizes are M up to a few thousand, where a direct symmetric
//! eigensolver is the simplest correct tool.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::augmodel::AugmentationModel;
use crate::error::{Error, Result};
use crate::linalg;

/// All derived matrices and the spectrum of one model.
///
/// Augmentations with zero marginal mass are dropped before normalization
/// (their rows of A_norm would be 0/0); `kept_augs` maps the retained
/// columns back to the model's augmentation indices. Immutable after build.
#[derive(Debug, Clone)]
pub struct SpectralGraph {
    /// Input marginals (diagonal of Dbar), length N.
    dbar: Vec<f64>,
    /// Kept augmentation marginals (diagonal of D), length M'.
    dmat: Vec<f64>,
    /// Joint input-augmentation mass, N x M'.
    abar: DMatrix<f64>,
    /// Entries w(i,x) / sqrt(w_i w_x), N x M'.
    abar_norm: DMatrix<f64>,
    /// Augmentation-side joint A = Abar^T Dbar^{-1} Abar, M' x M'.
    amat: DMatrix<f64>,
    /// Normalized adjacency D^{-1/2} A D^{-1/2}, M' x M'.
    anorm: DMatrix<f64>,
    /// Eigenvalues of I - A_norm, ascending.
    laplacian_eigs: Vec<f64>,
    /// Eigenvalues of A_norm, descending (1 - laplacian_eigs).
    anorm_eigs: Vec<f64>,
    /// Eigenvectors of A_norm, column i matching anorm_eigs[i].
    eigvecs: DMatrix<f64>,
    /// Original augmentation index of each kept column.
    kept_augs: Vec<usize>,
}

/// Build every matrix and the full spectrum for a model.
///
/// Eigen-ties are broken by solver order; all downstream formulas consume
/// sorted eigenvalues only, so tie order is immaterial.
pub fn build_matrices(model: &AugmentationModel) -> Result<SpectralGraph> {
    let n = model.n_inputs();
    for (i, &w) in model.input_marginal().iter().enumerate() {
        if w <= 0.0 {
            return Err(Error::InvalidModel(format!(
                "input {i} has zero marginal mass; normalized matrices undefined"
            )));
        }
    }
    let kept_augs: Vec<usize> = (0..model.n_augs())
        .filter(|&j| model.aug_marginal()[j] > 0.0)
        .collect();
    if kept_augs.is_empty() {
        return Err(Error::InvalidModel(
            "no augmentation has positive marginal mass".into(),
        ));
    }
    let m = kept_augs.len();

    let dbar = model.input_marginal().to_vec();
    let dmat: Vec<f64> = kept_augs.iter().map(|&j| model.aug_marginal()[j]).collect();

    let mut abar = DMatrix::zeros(n, m);
    for i in 0..n {
        for (c, &j) in kept_augs.iter().enumerate() {
            abar[(i, c)] = dbar[i] * model.cond()[(i, j)];
        }
    }
    let mut abar_norm = abar.clone();
    for i in 0..n {
        for c in 0..m {
            abar_norm[(i, c)] /= (dbar[i] * dmat[c]).sqrt();
        }
    }

    // A = Abar^T Dbar^{-1} Abar, then symmetric normalization by D^{-1/2}.
    let mut inv_dbar_abar = abar.clone();
    for i in 0..n {
        for c in 0..m {
            inv_dbar_abar[(i, c)] /= dbar[i];
        }
    }
    let amat = abar.transpose() * &inv_dbar_abar;
    let mut anorm = amat.clone();
    for r in 0..m {
        for c in 0..m {
            anorm[(r, c)] /= (dmat[r] * dmat[c]).sqrt();
        }
    }

    let (anorm_eigs, eigvecs) = linalg::symmetric_eigen_desc(&anorm);
    let laplacian_eigs: Vec<f64> = anorm_eigs.iter().map(|g| 1.0 - g).collect();

    Ok(SpectralGraph {
        dbar,
        dmat,
        abar,
        abar_norm,
        amat,
        anorm,
        laplacian_eigs,
        anorm_eigs,
        eigvecs,
        kept_augs,
    })
}

impl SpectralGraph {
    pub fn n_inputs(&self) -> usize {
        self.dbar.len()
    }

    /// Number of kept augmentations M'.
    pub fn n_augs(&self) -> usize {
        self.dmat.len()
    }

    pub fn input_marginal(&self) -> &[f64] {
        &self.dbar
    }

    pub fn aug_marginal(&self) -> &[f64] {
        &self.dmat
    }

    pub fn abar(&self) -> &DMatrix<f64> {
        &self.abar
    }

    pub fn abar_norm(&self) -> &DMatrix<f64> {
        &self.abar_norm
    }

    pub fn amat(&self) -> &DMatrix<f64> {
        &self.amat
    }

    pub fn anorm(&self) -> &DMatrix<f64> {
        &self.anorm
    }

    /// Eigenvalues of I - A_norm, ascending; laplacian_eigs()[d] is the
    /// (d+1)-th smallest.
    pub fn laplacian_eigs(&self) -> &[f64] {
        &self.laplacian_eigs
    }

    /// Eigenvalues of A_norm, descending.
    pub fn anorm_eigs(&self) -> &[f64] {
        &self.anorm_eigs
    }

    /// Eigenvectors of A_norm; column i pairs with anorm_eigs()[i].
    pub fn anorm_eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn kept_augs(&self) -> &[usize] {
        &self.kept_augs
    }

    /// Max-abs entrywise residual of A_norm = Abar_norm^T Abar_norm.
    ///
    /// The identity holds by construction, so the residual is rounding noise
    /// unless a matrix has been tampered with; tests use it as a detector.
    pub fn gram_identity_residual(&self) -> f64 {
        let gram = self.abar_norm.transpose() * &self.abar_norm;
        linalg::max_abs_diff(&self.anorm, &gram)
    }

    /// Write the spectrum as CSV rows `index,lambda,gamma`, ascending lambda,
    /// index counting from 1.
    pub fn spectrum_csv(&self) -> String {
        let mut out = String::from("index,lambda,gamma\n");
        for (i, (&l, &g)) in self
            .laplacian_eigs
            .iter()
            .zip(self.anorm_eigs.iter())
            .enumerate()
        {
            let _ = writeln!(out, "{},{},{}", i + 1, l, g);
        }
        out
    }

    pub fn export_spectrum(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.spectrum_csv())?;
        Ok(())
    }
}

/// Error of the optimal input-from-augmentation classifier.
///
/// The best guess for augmentation x is the posterior mode, so the error is
/// 1 - sum_x max_i w_i cond[i][x]. Zero exactly when the model is disjoint.
pub fn bayes_error(model: &AugmentationModel) -> f64 {
    let mut correct = 0.0;
    for j in 0..model.n_augs() {
        let best = (0..model.n_inputs())
            .map(|i| model.input_marginal()[i] * model.cond()[(i, j)])
            .fold(0.0_f64, f64::max);
        correct += best;
    }
    (1.0 - correct).max(0.0)
}

/// Upper bound on the (d+1)-th smallest Laplacian eigenvalue:
/// 2 rho tau / (1 - d/N), with rho the max/min input-marginal ratio and tau
/// the optimal classifier error. Uniform marginals give rho = 1.
pub fn eigengap_bound(model: &AugmentationModel, d: usize) -> Result<f64> {
    let n = model.n_inputs();
    if d >= n {
        return Err(Error::InvalidArgument(format!(
            "eigengap bound needs d < N, got d={d} N={n}"
        )));
    }
    let wmax = model.input_marginal().iter().cloned().fold(f64::MIN, f64::max);
    let wmin = model.input_marginal().iter().cloned().fold(f64::MAX, f64::min);
    if wmin <= 0.0 {
        return Err(Error::InvalidModel(
            "eigengap bound needs positive input marginals".into(),
        ));
    }
    let rho = wmax / wmin;
    let tau = bayes_error(model);
    Ok(2.0 * rho * tau / (1.0 - d as f64 / n as f64))
}

// ============================================================================
// Tests
// ============================================================================
