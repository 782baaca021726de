//! Loss and evaluation functionals.
//!
//! Population quantities are exact sums over the finite model tables;
//! sampled variants take caller-owned generators. Conventions: a
//! representation is an M x d matrix with row x = f(x); its normalized form
//! is D^{1/2} F with D the augmentation marginal. Labels are exactly +-1.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::augmodel::AugmentationModel;
use crate::error::{Error, Result};
use crate::linalg;
use crate::solver::FeatureMatrix;
use crate::spectral::SpectralGraph;

// ============================================================================
// Representations and labels
// ============================================================================

/// A representation tabulated on augmentations: row x is f(x).
#[derive(Debug, Clone)]
pub struct RepMatrix {
    values: DMatrix<f64>,
}

impl RepMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "representation needs at least one dimension".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "representation has non-finite entries".into(),
            ));
        }
        Ok(RepMatrix { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim_d(&self) -> usize {
        self.values.ncols()
    }

    /// D^{1/2} F: row x scaled by sqrt of the augmentation marginal.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelDomain {
    Inputs,
    Augmentations,
}

/// A +-1 labeling of inputs or augmentations.
#[derive(Debug, Clone)]
pub struct LabelFunction {
    domain: LabelDomain,
    values: Vec<f64>,
    balanced: bool,
}

impl LabelFunction {
    pub fn new(domain: LabelDomain, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty label vector".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if v != 1.0 && v != -1.0 {
                return Err(Error::InvalidArgument(format!(
                    "label at {i} is {v}, must be exactly +1 or -1"
                )));
            }
        }
        let sum: f64 = values.iter().sum();
        Ok(LabelFunction { domain, values, balanced: sum == 0.0 })
    }

    pub fn domain(&self) -> LabelDomain {
        self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn balanced(&self) -> bool {
        self.balanced
    }

    pub fn negate(&self) -> LabelFunction {
        LabelFunction {
            domain: self.domain,
            values: self.values.iter().map(|v| -v).collect(),
            balanced: self.balanced,
        }
    }
}

fn expect_domain(l: &LabelFunction, d: LabelDomain, what: &str) -> Result<()> {
    if l.domain() != d {
        return Err(Error::InvalidArgument(format!(
            "{what} must be defined on {d:?}"
        )));
    }
    Ok(())
}

// ============================================================================
// Spectral contrastive loss
// ============================================================================

/// Exact population spectral loss ||A_norm - F_n F_n^T||_F^2 - ||A_norm||_F^2,
/// evaluated in the cheaper trace form -2 tr(F_n^T A_norm F_n) + ||F_n^T F_n||_F^2.
pub fn spectral_loss_exact(graph: &SpectralGraph, f: &RepMatrix) -> Result<f64> {
    if f.n_rows() != graph.n_augs() {
        return Err(Error::DimensionMismatch(format!(
            "representation has {} rows, graph has {} augmentations",
            f.n_rows(),
            graph.n_augs()
        )));
    }
    let fn_mat = f.normalized(graph.aug_marginal());
    let af = graph.anorm() * &fn_mat;
    let cross: f64 = fn_mat.iter().zip(af.iter()).map(|(a, b)| a * b).sum();
    let gram = fn_mat.transpose() * &fn_mat;
    Ok(-2.0 * cross + gram.norm_squared())
}

/// Monte Carlo estimate of the spectral loss:
/// -2 E f(x)^T f(x+) over similar pairs plus E (f(x)^T f(x'))^2 over
/// independent negatives, each averaged over `n_pairs` draws.
pub fn spectral_loss_sampled(
    model: &AugmentationModel,
    f: &RepMatrix,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if f.n_rows() != model.n_augs() {
        return Err(Error::DimensionMismatch(format!(
            "representation has {} rows, model has {} augmentations",
            f.n_rows(),
            model.n_augs()
        )));
    }
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be at least 1".into()));
    }
    let v = f.values();
    let dot = |a: usize, b: usize| -> f64 { v.row(a).dot(&v.row(b)) };
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let (x, xp) = model.sample_similar_pair(rng);
        let xn1 = model.sample_negative(rng);
        let xn2 = model.sample_negative(rng);
        let neg = dot(xn1, xn2);
        total += -2.0 * dot(x, xp) + neg * neg;
    }
    Ok(total / n_pairs as f64)
}

// ============================================================================
// SimCLR loss
// ============================================================================

/// Symmetric batch InfoNCE on pairs of augmentation indices.
///
/// Each pair contributes two anchors; every anchor scores its positive
/// against the 2B-2 other batch elements under similarity z_a . z_j / T,
/// with rows unit-normalized first when `normalize`. Returns the mean of
/// -log softmax over the 2B anchors.
pub fn simclr_loss(
    batch: &[(usize, usize)],
    f: &RepMatrix,
    temperature: f64,
    normalize: bool,
) -> Result<f64> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch needs at least 2 pairs, got {b}"
        )));
    }
    let mut z = DMatrix::zeros(2 * b, f.dim_d());
    for (i, &(a, p)) in batch.iter().enumerate() {
        if a >= f.n_rows() || p >= f.n_rows() {
            return Err(Error::InvalidArgument(format!(
                "pair ({a},{p}) outside representation with {} rows",
                f.n_rows()
            )));
        }
        z.set_row(2 * i, &f.values().row(a));
        z.set_row(2 * i + 1, &f.values().row(p));
    }
    simclr_loss_stacked(&z, temperature, normalize)
}

/// SimCLR core on an already-stacked 2B x d matrix where rows 2i and 2i+1
/// are positives of each other.
pub fn simclr_loss_stacked(z: &DMatrix<f64>, temperature: f64, normalize: bool) -> Result<f64> {
    let n = z.nrows();
    if n < 4 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "stacked batch needs an even row count >= 4, got {n}"
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let zn = if normalize {
        let mut out = z.clone();
        for i in 0..n {
            let norm = out.row(i).norm();
            if norm == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has zero norm; cosine similarity undefined"
                )));
            }
            for j in 0..out.ncols() {
                out[(i, j)] /= norm;
            }
        }
        out
    } else {
        z.clone()
    };

    let scores = (&zn * zn.transpose()) / temperature;
    let mut total = 0.0;
    for a in 0..n {
        let p = a ^ 1;
        // Row max over candidates keeps the exp sum finite for tiny T.
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            if j != a {
                mx = mx.max(scores[(a, j)]);
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != a {
                denom += (scores[(a, j)] - mx).exp();
            }
        }
        total += -(scores[(a, p)] - mx) + denom.ln();
    }
    Ok(total / n as f64)
}

// ============================================================================
// Downstream evaluation
// ============================================================================

/// Augmentation-averaged representation: row i is E_{x ~ A(.|xbar_i)} f(x).
pub fn averaged_representation(model: &AugmentationModel, f: &RepMatrix) -> Result<DMatrix<f64>> {
    if f.n_rows() != model.n_augs() {
        return Err(Error::DimensionMismatch(format!(
            "representation has {} rows, model has {} augmentations",
            f.n_rows(),
            model.n_augs()
        )));
    }
    Ok(model.cond() * f.values())
}

/// Linear probe used by classification losses.
#[derive(Debug, Clone, Copy)]
pub enum ProbeSpec {
    /// Unregularized least squares on +-1 targets.
    LeastSquares,
    /// Gradient descent on the weighted logistic loss, best iterate kept.
    Logistic { steps: usize, lr: f64 },
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec::LeastSquares
    }
}

/// Fit a linear probe on weighted (features, +-1 target) rows and return the
/// weighted 0-1 error of sign(features . w). Exact zero scores count as
/// errors: conservative and deterministic.
pub fn probe_error(
    features: &DMatrix<f64>,
    weights: &[f64],
    targets: &[f64],
    probe: ProbeSpec,
) -> Result<(f64, DVector<f64>)> {
    let n = features.nrows();
    if weights.len() != n || targets.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "features {n} rows, {} weights, {} targets",
            weights.len(),
            targets.len()
        )));
    }
    let y = DVector::from_column_slice(targets);
    let w = match probe {
        ProbeSpec::LeastSquares => linalg::weighted_lstsq(features, &y, weights),
        ProbeSpec::Logistic { steps, lr } => fit_logistic(features, &y, weights, steps, lr),
    };
    let scores = features * &w;
    let mut err = 0.0;
    for i in 0..n {
        let correct = scores[i] * targets[i] > 0.0;
        if !correct {
            err += weights[i];
        }
    }
    let total: f64 = weights.iter().sum();
    Ok((if total > 0.0 { err / total } else { 1.0 }, w))
}

fn fit_logistic(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &[f64],
    steps: usize,
    lr: f64,
) -> DVector<f64> {
    let n = x.nrows();
    let mut beta = DVector::zeros(x.ncols());
    let mut best = beta.clone();
    let mut best_loss = f64::INFINITY;
    for _ in 0..steps {
        let s = x * &beta;
        let mut loss = 0.0;
        let mut resid = DVector::zeros(n);
        for i in 0..n {
            let m = y[i] * s[i];
            // log(1 + e^{-m}) in a form stable for large |m|.
            loss += weights[i] * ((-m.abs()).exp().ln_1p() + (-m).max(0.0));
            resid[i] = weights[i] * y[i] / (1.0 + m.exp());
        }
        if loss < best_loss {
            best_loss = loss;
            best = beta.clone();
        }
        let grad = x.transpose() * resid;
        beta += lr * grad;
    }
    // Final iterate may beat the last recorded best.
    let s = x * &beta;
    let mut loss = 0.0;
    for i in 0..n {
        let m = y[i] * s[i];
        loss += weights[i] * ((-m.abs()).exp().ln_1p() + (-m).max(0.0));
    }
    if loss < best_loss {
        best = beta;
    }
    best
}

/// Downstream 0-1 error of the best linear probe on the averaged
/// representation, weighted by the input marginal.
pub fn clf_loss(
    model: &AugmentationModel,
    f: &RepMatrix,
    ystar: &LabelFunction,
    probe: ProbeSpec,
) -> Result<f64> {
    expect_domain(ystar, LabelDomain::Inputs, "downstream labels")?;
    if ystar.values().len() != model.n_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} inputs",
            ystar.values().len(),
            model.n_inputs()
        )));
    }
    let fbar = averaged_representation(model, f)?;
    let (err, _) = probe_error(&fbar, model.input_marginal(), ystar.values(), probe)?;
    Ok(err)
}

/// Regression residual of a +-1 target on augmentations against the feature
/// span: squared norm of the component of D^{1/2} g orthogonal to the
/// columns of D^{1/2} Phi.
pub fn reg_loss_features(
    model: &AugmentationModel,
    phi: &FeatureMatrix,
    g: &LabelFunction,
) -> Result<f64> {
    expect_domain(g, LabelDomain::Augmentations, "regression target")?;
    if g.values().len() != model.n_augs() || phi.n_rows() != model.n_augs() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels, {} feature rows, {} augmentations",
            g.values().len(),
            phi.n_rows(),
            model.n_augs()
        )));
    }
    let phin = phi.normalized(model.aug_marginal());
    let mut gnorm = DVector::zeros(model.n_augs());
    for (i, &w) in model.aug_marginal().iter().enumerate() {
        gnorm[i] = w.sqrt() * g.values()[i];
    }
    let basis = linalg::orthonormal_range_basis(&phin);
    if basis.ncols() == 0 {
        return Ok(gnorm.norm_squared());
    }
    let resid = &gnorm - &basis * (basis.transpose() * &gnorm);
    Ok(resid.norm_squared())
}

/// Probability that a label on augmentations disagrees with the input label
/// it was generated from: E_xbar E_{x|xbar} 1{g(x) != ystar(xbar)}.
pub fn inconsistency(
    model: &AugmentationModel,
    g: &LabelFunction,
    ystar: &LabelFunction,
) -> Result<f64> {
    expect_domain(g, LabelDomain::Augmentations, "augmentation labels")?;
    expect_domain(ystar, LabelDomain::Inputs, "input labels")?;
    if g.values().len() != model.n_augs() || ystar.values().len() != model.n_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "{} aug labels / {} input labels for a {}x{} model",
            g.values().len(),
            ystar.values().len(),
            model.n_inputs(),
            model.n_augs()
        )));
    }
    let mut delta = 0.0;
    for i in 0..model.n_inputs() {
        let w = model.input_marginal()[i];
        for x in 0..model.n_augs() {
            if g.values()[x] != ystar.values()[i] {
                delta += w * model.cond()[(i, x)];
            }
        }
    }
    Ok(delta)
}

/// The bilinear form (Dbar^{1/2} ystar)^T Abar_norm (D^{1/2} g), which
/// equals 1 - 2 * inconsistency for any +-1 labelings.
pub fn alignment_identity(
    graph: &SpectralGraph,
    g: &LabelFunction,
    ystar: &LabelFunction,
) -> Result<f64> {
    expect_domain(g, LabelDomain::Augmentations, "augmentation labels")?;
    expect_domain(ystar, LabelDomain::Inputs, "input labels")?;
    if ystar.values().len() != graph.n_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} inputs",
            ystar.values().len(),
            graph.n_inputs()
        )));
    }
    for &j in graph.kept_augs() {
        if j >= g.values().len() {
            return Err(Error::DimensionMismatch(format!(
                "graph references augmentation {j} beyond {} labels",
                g.values().len()
            )));
        }
    }
    let mut total = 0.0;
    for i in 0..graph.n_inputs() {
        let yi = graph.input_marginal()[i].sqrt() * ystar.values()[i];
        for (c, &j) in graph.kept_augs().iter().enumerate() {
            let gx = graph.aug_marginal()[c].sqrt() * g.values()[j];
            total += yi * graph.abar_norm()[(i, c)] * gx;
        }
    }
    Ok(total)
}

/// Label each augmentation by the input label of its posterior mode,
/// breaking ties toward the smaller input index.
pub fn posterior_mode_labels(
    model: &AugmentationModel,
    ystar: &LabelFunction,
) -> Result<LabelFunction> {
    expect_domain(ystar, LabelDomain::Inputs, "input labels")?;
    if ystar.values().len() != model.n_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} inputs",
            ystar.values().len(),
            model.n_inputs()
        )));
    }
    let mut g = Vec::with_capacity(model.n_augs());
    for x in 0..model.n_augs() {
        let mut best_i = 0usize;
        let mut best_mass = f64::MIN;
        for i in 0..model.n_inputs() {
            let mass = model.input_marginal()[i] * model.cond()[(i, x)];
            if mass > best_mass {
                best_mass = mass;
                best_i = i;
            }
        }
        g.push(ystar.values()[best_i]);
    }
    LabelFunction::new(LabelDomain::Augmentations, g)
}

// ============================================================================
// Tests
// ============================================================================
