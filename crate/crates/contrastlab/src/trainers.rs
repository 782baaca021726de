//! Gradient-based contrastive training for three small representation
//! classes: linear maps, two-layer relu MLPs, and bag-of-words embedding
//! tables.
//!
//! All backprop is written out by hand against flat parameter vectors so a
//! central finite difference can audit every path, including the cosine
//! normalization inside the InfoNCE loss. Training is single threaded and
//! reduction-order deterministic: one seed fixes the whole trajectory.
//!
//! Seed discipline: a run seed is split by fixed stream counters
//! (initialization uses stream 4, the batch stream uses stream 5), so
//! consumers can be added without perturbing existing streams.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augmodel::AugmentationModel;
use crate::error::{Error, Result};
use crate::linalg::lstsq_matrix;
use crate::losses::{probe_error, LabelFunction, ProbeSpec};
use crate::rng::stream_rng;

const INIT_STREAM: u64 = 4;
const TRAIN_STREAM: u64 = 5;
const ADAM_EPS: f64 = 1e-8;
/// Validation pairs are scored in chunks of this many pairs.
const VAL_CHUNK: usize = 256;

// ============================================================================
// Representations
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepKind {
    Linear,
    Mlp2,
    Bow,
}

/// One training input: a dense vector or a token-index list.
#[derive(Debug, Clone)]
pub enum Input {
    Dense(Vec<f64>),
    Tokens(Vec<usize>),
}

/// A trainable representation with a flat parameter vector. Layouts:
/// linear W (in x d, row major); mlp2 W1 (in x h), b1, W2 (h x d), b2;
/// bow E (vocab x d, row major).
#[derive(Debug, Clone)]
pub struct TrainableRep {
    kind: RepKind,
    params: Vec<f64>,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
}

fn fan_in_init(rng: &mut ChaCha8Rng, count: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| rng.random_range(-bound..bound)).collect()
}

impl TrainableRep {
    pub fn new_linear(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, INIT_STREAM);
        TrainableRep {
            kind: RepKind::Linear,
            params: fan_in_init(&mut rng, in_dim * out_dim, in_dim),
            in_dim,
            hidden: 0,
            out_dim,
        }
    }

    pub fn new_mlp2(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, INIT_STREAM);
        let mut params = fan_in_init(&mut rng, in_dim * hidden, in_dim);
        params.extend(std::iter::repeat_n(0.0, hidden));
        params.extend(fan_in_init(&mut rng, hidden * out_dim, hidden));
        params.extend(std::iter::repeat_n(0.0, out_dim));
        TrainableRep { kind: RepKind::Mlp2, params, in_dim, hidden, out_dim }
    }

    /// Embedding table for bag-of-words, initialized like a linear layer on
    /// one-hot inputs.
    pub fn new_bow(vocab: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, INIT_STREAM);
        TrainableRep {
            kind: RepKind::Bow,
            params: fan_in_init(&mut rng, vocab * out_dim, vocab),
            in_dim: vocab,
            hidden: 0,
            out_dim,
        }
    }

    pub fn kind(&self) -> RepKind {
        self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    // mlp2 section offsets in the flat vector.
    fn off_b1(&self) -> usize {
        self.in_dim * self.hidden
    }

    fn off_w2(&self) -> usize {
        self.off_b1() + self.hidden
    }

    fn off_b2(&self) -> usize {
        self.off_w2() + self.hidden * self.out_dim
    }
}

enum Cache {
    Linear { x: Vec<f64> },
    Mlp { x: Vec<f64>, a: Vec<f64>, h: Vec<f64> },
    Bow { tokens: Vec<usize> },
}

fn forward_cached(rep: &TrainableRep, input: &Input) -> Result<(DVector<f64>, Cache)> {
    let d = rep.out_dim;
    match (rep.kind, input) {
        (RepKind::Linear, Input::Dense(x)) => {
            if x.len() != rep.in_dim {
                return Err(Error::DimensionMismatch(format!(
                    "input has {} coordinates, expected {}",
                    x.len(),
                    rep.in_dim
                )));
            }
            let mut z = DVector::zeros(d);
            for (i, &xi) in x.iter().enumerate() {
                for j in 0..d {
                    z[j] += xi * rep.params[i * d + j];
                }
            }
            Ok((z, Cache::Linear { x: x.clone() }))
        }
        (RepKind::Mlp2, Input::Dense(x)) => {
            if x.len() != rep.in_dim {
                return Err(Error::DimensionMismatch(format!(
                    "input has {} coordinates, expected {}",
                    x.len(),
                    rep.in_dim
                )));
            }
            let h = rep.hidden;
            let mut a = vec![0.0; h];
            for (i, &xi) in x.iter().enumerate() {
                for j in 0..h {
                    a[j] += xi * rep.params[i * h + j];
                }
            }
            for (j, aj) in a.iter_mut().enumerate() {
                *aj += rep.params[rep.off_b1() + j];
            }
            let hv: Vec<f64> = a.iter().map(|&v| v.max(0.0)).collect();
            let mut z = DVector::zeros(d);
            for (j, &hj) in hv.iter().enumerate() {
                for k in 0..d {
                    z[k] += hj * rep.params[rep.off_w2() + j * d + k];
                }
            }
            for k in 0..d {
                z[k] += rep.params[rep.off_b2() + k];
            }
            Ok((z, Cache::Mlp { x: x.clone(), a, h: hv }))
        }
        (RepKind::Bow, Input::Tokens(tokens)) => {
            if tokens.is_empty() {
                return Err(Error::InvalidArgument(
                    "bag-of-words input needs at least one token".into(),
                ));
            }
            if let Some(&t) = tokens.iter().find(|&&t| t >= rep.in_dim) {
                return Err(Error::InvalidArgument(format!(
                    "token index {t} outside vocabulary of {}",
                    rep.in_dim
                )));
            }
            let mut z = DVector::zeros(d);
            for &t in tokens {
                for j in 0..d {
                    z[j] += rep.params[t * d + j];
                }
            }
            z /= tokens.len() as f64;
            Ok((z, Cache::Bow { tokens: tokens.clone() }))
        }
        _ => Err(Error::InvalidArgument(
            "input variant does not match the representation kind".into(),
        )),
    }
}

/// Map one input to its d-dimensional embedding.
pub fn forward(rep: &TrainableRep, input: &Input) -> Result<DVector<f64>> {
    forward_cached(rep, input).map(|(z, _)| z)
}

fn accumulate(rep: &TrainableRep, cache: &Cache, dz: &DVector<f64>, grad: &mut [f64]) {
    let d = rep.out_dim;
    match cache {
        Cache::Linear { x } => {
            for (i, &xi) in x.iter().enumerate() {
                for j in 0..d {
                    grad[i * d + j] += xi * dz[j];
                }
            }
        }
        Cache::Mlp { x, a, h } => {
            let hid = rep.hidden;
            for k in 0..d {
                grad[rep.off_b2() + k] += dz[k];
            }
            let mut dh = vec![0.0; hid];
            for (j, &hj) in h.iter().enumerate() {
                for k in 0..d {
                    grad[rep.off_w2() + j * d + k] += hj * dz[k];
                    dh[j] += rep.params[rep.off_w2() + j * d + k] * dz[k];
                }
            }
            for j in 0..hid {
                let da = if a[j] > 0.0 { dh[j] } else { 0.0 };
                grad[rep.off_b1() + j] += da;
                for (i, &xi) in x.iter().enumerate() {
                    grad[i * hid + j] += xi * da;
                }
            }
        }
        Cache::Bow { tokens } => {
            let scale = 1.0 / tokens.len() as f64;
            for &t in tokens {
                for j in 0..d {
                    grad[t * d + j] += scale * dz[j];
                }
            }
        }
    }
}

// ============================================================================
// Batch losses on embeddings
// ============================================================================

/// Loss evaluated on a batch of augmentation pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// InfoNCE over the 2B-2 within-batch negatives, cosine scores when
    /// `normalize` is set.
    Simclr { temperature: f64, normalize: bool },
    /// Batch estimator of the spectral loss: -2 mean positive inner product
    /// plus the mean squared cross inner product over non-partner pairs.
    SpectralSampled,
}

/// Loss value and gradient with respect to the embedding rows.
fn loss_and_dz(z: &DMatrix<f64>, spec: &LossSpec) -> Result<(f64, DMatrix<f64>)> {
    match *spec {
        LossSpec::Simclr { temperature, normalize } => simclr_value_grad(z, temperature, normalize),
        LossSpec::SpectralSampled => Ok(spectral_value_grad(z)),
    }
}

fn simclr_value_grad(
    z: &DMatrix<f64>,
    temperature: f64,
    normalize: bool,
) -> Result<(f64, DMatrix<f64>)> {
    let rows = z.nrows();
    let d = z.ncols();
    if rows < 4 || rows % 2 != 0 {
        return Err(Error::InvalidArgument(
            "InfoNCE needs an even number of rows and at least two pairs".into(),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let mut u = z.clone();
    let mut norms = vec![1.0; rows];
    if normalize {
        for i in 0..rows {
            let n = u.row(i).norm();
            if n == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has zero norm and cannot be cosine-normalized"
                )));
            }
            norms[i] = n;
            for j in 0..d {
                u[(i, j)] /= n;
            }
        }
    }
    let scores = &u * u.transpose() / temperature;

    let mut loss = 0.0;
    // g = dL/dscores, zero on the diagonal.
    let mut g = DMatrix::zeros(rows, rows);
    let inv = 1.0 / rows as f64;
    for a in 0..rows {
        let partner = a ^ 1;
        let mut row_max = f64::MIN;
        for k in 0..rows {
            if k != a {
                row_max = row_max.max(scores[(a, k)]);
            }
        }
        let mut denom = 0.0;
        for k in 0..rows {
            if k != a {
                denom += (scores[(a, k)] - row_max).exp();
            }
        }
        loss += inv * (denom.ln() + row_max - scores[(a, partner)]);
        for k in 0..rows {
            if k != a {
                let p = (scores[(a, k)] - row_max).exp() / denom;
                g[(a, k)] = inv * (p - if k == partner { 1.0 } else { 0.0 });
            }
        }
    }

    // scores = U U^T / T, so dL/dU = (G + G^T) U / T.
    let du = (&g + g.transpose()) * &u / temperature;
    let dz = if normalize {
        // Rows of U are z / |z|; project out the radial component.
        let mut dz = du;
        for i in 0..rows {
            let radial = dz.row(i).dot(&u.row(i));
            for j in 0..d {
                dz[(i, j)] = (dz[(i, j)] - radial * u[(i, j)]) / norms[i];
            }
        }
        dz
    } else {
        du
    };
    Ok((loss, dz))
}

fn spectral_value_grad(z: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let rows = z.nrows();
    let pairs = rows / 2;
    let mut loss = 0.0;
    let mut dz = DMatrix::zeros(rows, z.ncols());
    let gram = z * z.transpose();
    for b in 0..pairs {
        loss -= 2.0 / pairs as f64 * gram[(2 * b, 2 * b + 1)];
        for j in 0..z.ncols() {
            dz[(2 * b, j)] -= 2.0 / pairs as f64 * z[(2 * b + 1, j)];
            dz[(2 * b + 1, j)] -= 2.0 / pairs as f64 * z[(2 * b, j)];
        }
    }
    if rows > 2 {
        let count = (rows * (rows - 2)) as f64;
        // Mask self and partner entries, then both orderings of (i, j)
        // contribute, so dz gains (4/count) (gram masked) z.
        let mut masked = gram;
        for i in 0..rows {
            masked[(i, i)] = 0.0;
            masked[(i, i ^ 1)] = 0.0;
        }
        for i in 0..rows {
            for j in 0..rows {
                loss += masked[(i, j)] * masked[(i, j)] / count;
            }
        }
        masked *= 4.0 / count;
        dz += masked * z;
    }
    (loss, dz)
}

/// Embeddings of a pair batch, rows 2b and 2b+1 holding pair b.
pub fn batch_embeddings(rep: &TrainableRep, batch: &[(Input, Input)]) -> Result<DMatrix<f64>> {
    let mut z = DMatrix::zeros(2 * batch.len(), rep.out_dim);
    for (b, (first, second)) in batch.iter().enumerate() {
        let za = forward(rep, first)?;
        let zb = forward(rep, second)?;
        z.row_mut(2 * b).copy_from(&za.transpose());
        z.row_mut(2 * b + 1).copy_from(&zb.transpose());
    }
    Ok(z)
}

fn loss_and_grad(
    rep: &TrainableRep,
    batch: &[(Input, Input)],
    spec: &LossSpec,
    row_shift: Option<&DMatrix<f64>>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    let mut caches = Vec::with_capacity(2 * batch.len());
    let mut z = DMatrix::zeros(2 * batch.len(), rep.out_dim);
    for (b, (first, second)) in batch.iter().enumerate() {
        for (slot, input) in [first, second].into_iter().enumerate() {
            let (zi, cache) = forward_cached(rep, input)?;
            z.row_mut(2 * b + slot).copy_from(&zi.transpose());
            caches.push(cache);
        }
    }
    if let Some(shift) = row_shift {
        z += shift;
    }
    let (loss, dz) = loss_and_dz(&z, spec)?;
    let mut grad = vec![0.0; rep.params.len()];
    for (i, cache) in caches.iter().enumerate() {
        let dzi = dz.row(i).transpose();
        accumulate(rep, cache, &dzi, &mut grad);
    }
    Ok((loss, grad))
}

/// Batch loss value for the given pair batch.
pub fn batch_loss(rep: &TrainableRep, batch: &[(Input, Input)], spec: &LossSpec) -> Result<f64> {
    loss_and_grad(rep, batch, spec, None).map(|(l, _)| l)
}

/// Batch loss on precomputed embedding rows (pairs in rows 2b, 2b+1).
pub fn loss_on_embeddings(z: &DMatrix<f64>, spec: &LossSpec) -> Result<f64> {
    loss_and_dz(z, spec).map(|(l, _)| l)
}

/// Analytic gradient of the batch loss in the flat parameter layout.
pub fn gradients(
    rep: &TrainableRep,
    batch: &[(Input, Input)],
    spec: &LossSpec,
) -> Result<Vec<f64>> {
    loss_and_grad(rep, batch, spec, None).map(|(_, g)| g)
}

/// Worst tolerance ratio of the analytic gradient against a central finite
/// difference with h = 1e-5. A parameter passes when
/// |analytic - numeric| <= 1e-7 + 1e-4 |numeric|; the returned value is the
/// maximum of |analytic - numeric| / tolerance, so <= 1 means all pass.
pub fn finite_difference_check(
    rep: &TrainableRep,
    batch: &[(Input, Input)],
    spec: &LossSpec,
) -> Result<f64> {
    let h = 1e-5;
    let analytic = gradients(rep, batch, spec)?;
    let mut probe = rep.clone();
    let mut worst = 0.0_f64;
    for j in 0..analytic.len() {
        let orig = probe.params[j];
        probe.params[j] = orig + h;
        let up = batch_loss(&probe, batch, spec)?;
        probe.params[j] = orig - h;
        let down = batch_loss(&probe, batch, spec)?;
        probe.params[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let tol = 1e-7 + 1e-4 * numeric.abs();
        worst = worst.max((analytic[j] - numeric).abs() / tol);
    }
    Ok(worst)
}

// ============================================================================
// Memory bank and label-orthogonal adjustment
// ============================================================================

/// FIFO store of labeled embeddings used to estimate per-class means.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<(f64, DVector<f64>)>,
    /// Samples passed through unadjusted because their class had no bank
    /// entries yet.
    pub missing_class_passthroughs: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity,
            entries: VecDeque::new(),
            missing_class_passthroughs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, label: f64, rep: DVector<f64>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((label, rep));
    }

    pub fn class_mean(&self, label: f64) -> Option<DVector<f64>> {
        let mut sum: Option<DVector<f64>> = None;
        let mut count = 0usize;
        for (l, v) in &self.entries {
            if *l == label {
                match &mut sum {
                    Some(s) => *s += v,
                    None => sum = Some(v.clone()),
                }
                count += 1;
            }
        }
        sum.map(|s| s / count as f64)
    }
}

/// Subtract each sample's class-mean embedding (estimated from the bank)
/// and then feed the raw batch into the bank FIFO. Samples whose class is
/// absent from the bank pass through unadjusted and are counted.
pub fn label_orthogonal_adjust(
    batch_reps: &DMatrix<f64>,
    labels: &[f64],
    bank: &mut MemoryBank,
) -> Result<DMatrix<f64>> {
    if labels.len() != batch_reps.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            batch_reps.nrows()
        )));
    }
    // One pass over the bank for all distinct batch labels; scanning it
    // per row would dominate the step cost at realistic bank sizes.
    let mut classes: Vec<f64> = Vec::new();
    for &y in labels {
        if !classes.contains(&y) {
            classes.push(y);
        }
    }
    let dim = batch_reps.ncols();
    let mut sums = vec![DVector::<f64>::zeros(dim); classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (l, v) in &bank.entries {
        if let Some(c) = classes.iter().position(|y| y == l) {
            sums[c] += v;
            counts[c] += 1;
        }
    }
    let mut adjusted = batch_reps.clone();
    for (i, &y) in labels.iter().enumerate() {
        let c = classes.iter().position(|&v| v == y).unwrap();
        if counts[c] > 0 {
            let mu = &sums[c];
            let n = counts[c] as f64;
            for j in 0..dim {
                adjusted[(i, j)] -= mu[j] / n;
            }
        } else {
            bank.missing_class_passthroughs += 1;
        }
    }
    for (i, &y) in labels.iter().enumerate() {
        bank.push(y, batch_reps.row(i).transpose());
    }
    Ok(adjusted)
}

// ============================================================================
// Probe fitting
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMethod {
    LeastSquares,
    Logistic,
}

/// Fit a linear classifier on frozen features and report its 0-1 error
/// (uniform sample weights, ties count as errors). Logistic runs 500
/// full-batch steps at lr 0.1 and keeps the best iterate.
pub fn fit_linear_probe(
    features: &DMatrix<f64>,
    ystar: &[f64],
    method: ProbeMethod,
) -> Result<(DVector<f64>, f64)> {
    if features.nrows() == 0 {
        return Err(Error::InvalidArgument("no rows to fit a probe on".into()));
    }
    let weights = vec![1.0 / features.nrows() as f64; features.nrows()];
    let spec = match method {
        ProbeMethod::LeastSquares => ProbeSpec::LeastSquares,
        ProbeMethod::Logistic => ProbeSpec::Logistic { steps: 500, lr: 0.1 },
    };
    let (err, w) = probe_error(features, &weights, ystar, spec)?;
    Ok((w, err))
}

// ============================================================================
// Training loop
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Full training configuration. `loss` carries the temperature for InfoNCE;
/// weight decay is decoupled from the Adam moments (it scales parameters
/// directly) and classical for SGD.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: Option<f64>,
    pub loss: LossSpec,
    pub seed: u64,
    pub label_orthogonal: bool,
    pub memory_bank_size: usize,
    /// Stop after this many epochs without validation-loss improvement.
    pub patience: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidArgument("lr must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if let LossSpec::Simclr { temperature, .. } = self.loss {
            if self.batch_size < 2 {
                return Err(Error::InvalidArgument(
                    "InfoNCE needs batch_size >= 2 for within-batch negatives".into(),
                ));
            }
            if temperature <= 0.0 {
                return Err(Error::InvalidArgument("temperature must be positive".into()));
            }
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Source of augmentation pairs (with per-pair downstream labels) for
/// training. Draws must be a pure function of the rng state.
pub trait PairSource {
    /// Pairs consumed per epoch; one epoch runs ceil(epoch_len/batch) batches.
    fn epoch_len(&self) -> usize;
    fn draw_batch(&self, b: usize, rng: &mut ChaCha8Rng) -> (Vec<(Input, Input)>, Vec<f64>);
}

/// Pair source backed by a finite augmentation model: draw an input from
/// its marginal, then two augmentations independently from its conditional.
/// Dense inputs use the model's augmentation points when present, one-hot
/// augmentation indicators otherwise.
pub struct ModelPairSource<'a> {
    model: &'a AugmentationModel,
    labels: Option<&'a LabelFunction>,
    epoch_pairs: usize,
    input_cdf: Vec<f64>,
    row_cdfs: Vec<Vec<f64>>,
}

impl<'a> ModelPairSource<'a> {
    pub fn new(
        model: &'a AugmentationModel,
        labels: Option<&'a LabelFunction>,
        epoch_pairs: usize,
    ) -> Self {
        let mut input_cdf = Vec::with_capacity(model.n_inputs());
        let mut acc = 0.0;
        for &w in model.input_marginal() {
            acc += w;
            input_cdf.push(acc);
        }
        *input_cdf.last_mut().expect("nonempty") = 1.0;
        let row_cdfs = (0..model.n_inputs())
            .map(|i| {
                let mut cdf = Vec::with_capacity(model.n_augs());
                let mut acc = 0.0;
                for x in 0..model.n_augs() {
                    acc += model.cond()[(i, x)];
                    cdf.push(acc);
                }
                *cdf.last_mut().expect("nonempty") = 1.0;
                cdf
            })
            .collect();
        ModelPairSource { model, labels, epoch_pairs, input_cdf, row_cdfs }
    }

    fn pick(cdf: &[f64], u: f64) -> usize {
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
    }

    fn aug_input(&self, x: usize) -> Input {
        match self.model.aug_points() {
            Some(points) => Input::Dense(points.row(x).iter().cloned().collect()),
            None => {
                let mut v = vec![0.0; self.model.n_augs()];
                v[x] = 1.0;
                Input::Dense(v)
            }
        }
    }
}

impl PairSource for ModelPairSource<'_> {
    fn epoch_len(&self) -> usize {
        self.epoch_pairs
    }

    fn draw_batch(&self, b: usize, rng: &mut ChaCha8Rng) -> (Vec<(Input, Input)>, Vec<f64>) {
        let mut pairs = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let i = Self::pick(&self.input_cdf, rng.random::<f64>());
            let x = Self::pick(&self.row_cdfs[i], rng.random::<f64>());
            let xp = Self::pick(&self.row_cdfs[i], rng.random::<f64>());
            pairs.push((self.aug_input(x), self.aug_input(xp)));
            labels.push(self.labels.map_or(0.0, |l| l.values()[i]));
        }
        (pairs, labels)
    }
}

/// Per-epoch evaluation data: a fixed held-out pair set for the contrastive
/// validation loss and a labeled probe set for downstream accuracy. When
/// `val_labels` is set (one label per pair) the validation embeddings are
/// centered by class mean before scoring, matching label-orthogonal training.
///
/// `probe_classes = 2` selects the signed protocol (labels are +-1, probe is
/// sign(w^T f), ties count as errors); larger values treat labels as class
/// ids 0..probe_classes and score a one-vs-rest probe by argmax.
pub struct Evaluator {
    pub val_pairs: Vec<(Input, Input)>,
    pub val_labels: Option<Vec<f64>>,
    pub probe_inputs: Vec<Input>,
    pub probe_labels: Vec<f64>,
    pub probe_classes: usize,
    pub loss: LossSpec,
}

impl Evaluator {
    pub fn evaluate(&self, rep: &TrainableRep) -> Result<(f64, f64)> {
        // Chunked validation loss, weighted by pair count per chunk.
        let needs_two = matches!(self.loss, LossSpec::Simclr { .. });
        if self.val_pairs.is_empty() || (needs_two && self.val_pairs.len() < 2) {
            return Err(Error::InvalidArgument(
                "validation set too small for the configured loss".into(),
            ));
        }
        if let Some(labels) = &self.val_labels {
            if labels.len() != self.val_pairs.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} validation labels for {} pairs",
                    labels.len(),
                    self.val_pairs.len()
                )));
            }
        }
        let mut z = batch_embeddings(rep, &self.val_pairs)?;
        if let Some(labels) = &self.val_labels {
            center_rows_by_class(&mut z, labels);
        }
        let mut total = 0.0;
        let mut start = 0;
        while start < self.val_pairs.len() {
            let mut end = (start + VAL_CHUNK).min(self.val_pairs.len());
            // Never leave a lone pair behind when InfoNCE needs two.
            if needs_two && self.val_pairs.len() - end == 1 {
                end += 1;
            }
            let chunk = z.rows(2 * start, 2 * (end - start)).clone_owned();
            total += loss_on_embeddings(&chunk, &self.loss)? * (end - start) as f64;
            start = end;
        }
        let val_loss = total / self.val_pairs.len() as f64;

        let mut features = DMatrix::zeros(self.probe_inputs.len(), rep.out_dim);
        for (i, input) in self.probe_inputs.iter().enumerate() {
            features.row_mut(i).copy_from(&forward(rep, input)?.transpose());
        }
        let acc = match self.probe_classes {
            0 | 1 => {
                return Err(Error::InvalidArgument(
                    "probe needs at least two classes".into(),
                ))
            }
            2 => {
                let (_, err) =
                    fit_linear_probe(&features, &self.probe_labels, ProbeMethod::LeastSquares)?;
                1.0 - err
            }
            c => multiclass_probe_accuracy(&features, &self.probe_labels, c)?,
        };
        Ok((val_loss, acc))
    }
}

/// One-vs-rest least-squares probe for class-id labels in 0..n_classes;
/// the prediction is the argmax score and accuracy is the plain hit rate.
pub fn multiclass_probe_accuracy(
    features: &DMatrix<f64>,
    labels: &[f64],
    n_classes: usize,
) -> Result<f64> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} feature rows",
            labels.len(),
            n
        )));
    }
    let mut targets = DMatrix::from_element(n, n_classes, -1.0);
    for (i, &y) in labels.iter().enumerate() {
        if y < 0.0 || y.fract() != 0.0 || y as usize >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} is not a class id below {n_classes}"
            )));
        }
        targets[(i, y as usize)] = 1.0;
    }
    let w = lstsq_matrix(features, &targets);
    let scores = features * w;
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = 0;
        for c in 1..n_classes {
            if scores[(i, c)] > scores[(i, best)] {
                best = c;
            }
        }
        if best == labels[i] as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Subtract the per-class mean row in place; `labels` has one entry per
/// pair and covers rows 2b and 2b+1.
fn center_rows_by_class(z: &mut DMatrix<f64>, labels: &[f64]) {
    let mut classes: Vec<f64> = Vec::new();
    for &y in labels {
        if !classes.contains(&y) {
            classes.push(y);
        }
    }
    for class in classes {
        let mut mean = DVector::<f64>::zeros(z.ncols());
        let mut count = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            if y == class {
                mean += z.row(2 * b).transpose() + z.row(2 * b + 1).transpose();
                count += 2.0;
            }
        }
        mean /= count;
        for (b, &y) in labels.iter().enumerate() {
            if y == class {
                for j in 0..z.ncols() {
                    z[(2 * b, j)] -= mean[j];
                    z[(2 * b + 1, j)] -= mean[j];
                }
            }
        }
    }
}

/// One trajectory row; wall_seconds is cumulative and excluded from any
/// reproducibility comparison.
#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub cont_val_loss: f64,
    pub downstream_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,cont_val_loss,downstream_acc,wall_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.3}\n",
                r.epoch, r.cont_val_loss, r.downstream_acc, r.wall_seconds
            ));
        }
        out
    }

    /// CSV with the timing column dropped; byte-identical across reruns of
    /// the same seed.
    pub fn to_csv_deterministic(&self) -> String {
        let mut out = String::from("epoch,cont_val_loss,downstream_acc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.cont_val_loss, r.downstream_acc));
        }
        out
    }

    pub fn final_row(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }
}

/// Train a representation in place, evaluating once per epoch. Aborts with
/// the failing epoch when the training loss stops being finite.
pub fn train_contrastive<S: PairSource>(
    source: &S,
    rep: &mut TrainableRep,
    cfg: &TrainConfig,
    eval: &Evaluator,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
    let n_params = rep.params.len();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0u32;
    let mut bank = MemoryBank::new(cfg.memory_bank_size);
    let batches_per_epoch = source.epoch_len().div_ceil(cfg.batch_size).max(1);

    let start = Instant::now();
    let mut trajectory = Trajectory::default();
    let mut best_val = f64::INFINITY;
    let mut stall = 0usize;

    for epoch in 1..=cfg.epochs {
        for _ in 0..batches_per_epoch {
            let (batch, labels) = source.draw_batch(cfg.batch_size, &mut rng);
            let shift = if cfg.label_orthogonal {
                let z = batch_embeddings(rep, &batch)?;
                let mut row_labels = Vec::with_capacity(z.nrows());
                for &y in &labels {
                    row_labels.push(y);
                    row_labels.push(y);
                }
                let adjusted = label_orthogonal_adjust(&z, &row_labels, &mut bank)?;
                Some(adjusted - z)
            } else {
                None
            };
            let (loss, mut grad) = loss_and_grad(rep, &batch, &cfg.loss, shift.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::NumericAbort {
                    epoch,
                    detail: format!("training loss became {loss}"),
                });
            }
            if let Some(clip) = cfg.grad_clip_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > clip {
                    let scale = clip / norm;
                    for g in &mut grad {
                        *g *= scale;
                    }
                }
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for j in 0..n_params {
                        rep.params[j] -=
                            cfg.lr * (grad[j] + cfg.weight_decay * rep.params[j]);
                    }
                }
                Optimizer::Adam => {
                    step += 1;
                    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
                    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
                    for j in 0..n_params {
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        rep.params[j] -= cfg.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                        rep.params[j] -= cfg.lr * cfg.weight_decay * rep.params[j];
                    }
                }
            }
        }
        let (val_loss, acc) = eval.evaluate(rep)?;
        if !val_loss.is_finite() {
            return Err(Error::NumericAbort {
                epoch,
                detail: format!("validation loss became {val_loss}"),
            });
        }
        trajectory.rows.push(TrajectoryRow {
            epoch,
            cont_val_loss: val_loss,
            downstream_acc: acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(patience) = cfg.patience {
            if val_loss < best_val - 1e-12 {
                best_val = val_loss;
                stall = 0;
            } else {
                stall += 1;
                if stall >= patience {
                    break;
                }
            }
        }
    }
    Ok(trajectory)
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmodel::{discretize_hypercube, HypercubeConfig};
    use crate::losses::simclr_loss_stacked;
    use crate::solver::{optimal_in_linear_class, FeatureMatrix};
    use crate::spectral::build_matrices;
    use approx::assert_abs_diff_eq;

    fn dense_batch(n_pairs: usize, dim: usize, seed: u64) -> Vec<(Input, Input)> {
        let mut rng = stream_rng(seed, 70);
        (0..n_pairs)
            .map(|_| {
                let a: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let b: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                (Input::Dense(a), Input::Dense(b))
            })
            .collect()
    }

    fn token_batch(n_pairs: usize, vocab: usize, len: usize, seed: u64) -> Vec<(Input, Input)> {
        let mut rng = stream_rng(seed, 71);
        (0..n_pairs)
            .map(|_| {
                let a: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
                let b: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
                (Input::Tokens(a), Input::Tokens(b))
            })
            .collect()
    }

    // ---- forward ----

    #[test]
    fn linear_identity_columns_project() {
        let mut rep = TrainableRep::new_linear(4, 2, 0);
        rep.params_mut().fill(0.0);
        rep.params_mut()[0 * 2 + 0] = 1.0;
        rep.params_mut()[1 * 2 + 1] = 1.0;
        let z = forward(&rep, &Input::Dense(vec![3.0, -1.0, 5.0, 7.0])).unwrap();
        assert_eq!(z.as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn mlp_zero_weights_output_bias() {
        let mut rep = TrainableRep::new_mlp2(3, 5, 2, 1);
        rep.params_mut().fill(0.0);
        let off = rep.off_b2();
        rep.params_mut()[off] = 0.25;
        rep.params_mut()[off + 1] = -4.0;
        let z = forward(&rep, &Input::Dense(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(z.as_slice(), &[0.25, -4.0]);
    }

    #[test]
    fn bow_repeated_token_is_its_row() {
        let rep = TrainableRep::new_bow(6, 3, 2);
        let z = forward(&rep, &Input::Tokens(vec![3, 3, 3])).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(z[j], rep.params()[3 * 3 + j], epsilon = 1e-15);
        }
        assert!(forward(&rep, &Input::Tokens(vec![])).is_err());
        assert!(forward(&rep, &Input::Tokens(vec![6])).is_err());
        assert!(forward(&rep, &Input::Dense(vec![0.0; 6])).is_err());
    }

    // ---- gradients ----

    #[test]
    fn single_pair_spectral_gradient_is_the_hand_polynomial() {
        // One pair, d = 1: L = -2 (w.x0)(w.x1), dL/dw = -2[(w.x1)x0 + (w.x0)x1].
        let rep = TrainableRep::new_linear(3, 1, 3);
        let x0 = vec![0.3, -1.2, 0.5];
        let x1 = vec![1.1, 0.4, -0.6];
        let batch = vec![(Input::Dense(x0.clone()), Input::Dense(x1.clone()))];
        let g = gradients(&rep, &batch, &LossSpec::SpectralSampled).unwrap();
        let w = rep.params();
        let s0: f64 = (0..3).map(|i| w[i] * x0[i]).sum();
        let s1: f64 = (0..3).map(|i| w[i] * x1[i]).sum();
        for i in 0..3 {
            let hand = -2.0 * (s1 * x0[i] + s0 * x1[i]);
            assert_abs_diff_eq!(g[i], hand, epsilon = 1e-12);
        }
    }

    #[test]
    fn finite_differences_pass_for_all_kinds_and_losses() {
        let specs = [
            LossSpec::Simclr { temperature: 0.5, normalize: true },
            LossSpec::Simclr { temperature: 1.0, normalize: false },
            LossSpec::SpectralSampled,
        ];
        for trial in 0..5u64 {
            let dense = dense_batch(3, 4, 100 + trial);
            let tokens = token_batch(3, 7, 5, 200 + trial);
            let reps: Vec<(TrainableRep, &[(Input, Input)])> = vec![
                (TrainableRep::new_linear(4, 3, 300 + trial), &dense),
                (TrainableRep::new_mlp2(4, 6, 3, 400 + trial), &dense),
                (TrainableRep::new_bow(7, 3, 500 + trial), &tokens),
            ];
            for (rep, batch) in &reps {
                for spec in &specs {
                    let worst = finite_difference_check(rep, batch, spec).unwrap();
                    assert!(
                        worst <= 1.0,
                        "{:?} {:?} trial {trial}: ratio {worst}",
                        rep.kind(),
                        spec
                    );
                }
            }
        }
    }

    #[test]
    fn zero_params_with_cosine_scores_reject_cleanly() {
        let mut rep = TrainableRep::new_linear(4, 2, 4);
        rep.params_mut().fill(0.0);
        let batch = dense_batch(3, 4, 5);
        let spec = LossSpec::Simclr { temperature: 0.5, normalize: true };
        let err = batch_loss(&rep, &batch, &spec).unwrap_err();
        assert!(err.to_string().contains("zero norm"));
    }

    #[test]
    fn grad_core_loss_value_matches_reference_infonce() {
        let rep = TrainableRep::new_mlp2(4, 5, 3, 6);
        let batch = dense_batch(4, 4, 6);
        let spec = LossSpec::Simclr { temperature: 0.7, normalize: true };
        let via_core = batch_loss(&rep, &batch, &spec).unwrap();
        let z = batch_embeddings(&rep, &batch).unwrap();
        let reference = simclr_loss_stacked(&z, 0.7, true).unwrap();
        assert_abs_diff_eq!(via_core, reference, epsilon = 1e-12);
    }

    // ---- memory bank ----

    #[test]
    fn bank_is_fifo_and_means_are_per_class() {
        let mut bank = MemoryBank::new(3);
        bank.push(1.0, DVector::from_vec(vec![1.0, 0.0]));
        bank.push(-1.0, DVector::from_vec(vec![0.0, 2.0]));
        bank.push(1.0, DVector::from_vec(vec![3.0, 0.0]));
        bank.push(1.0, DVector::from_vec(vec![5.0, 0.0]));
        // First entry evicted; class +1 holds rows (3,0) and (5,0).
        assert_eq!(bank.len(), 3);
        let mu = bank.class_mean(1.0).unwrap();
        assert_eq!(mu.as_slice(), &[4.0, 0.0]);
        assert!(bank.class_mean(2.0).is_none());
    }

    #[test]
    fn constant_class_reps_adjust_to_zero() {
        let mut bank = MemoryBank::new(16);
        for _ in 0..4 {
            bank.push(1.0, DVector::from_vec(vec![0.5, -1.0]));
            bank.push(-1.0, DVector::from_vec(vec![-0.5, 1.0]));
        }
        let reps = DMatrix::from_row_slice(4, 2, &[0.5, -1.0, -0.5, 1.0, 0.5, -1.0, -0.5, 1.0]);
        let adjusted =
            label_orthogonal_adjust(&reps, &[1.0, -1.0, 1.0, -1.0], &mut bank).unwrap();
        assert!(adjusted.amax() <= 1e-15);
        assert_eq!(bank.missing_class_passthroughs, 0);
    }

    #[test]
    fn missing_class_passes_through_and_counts() {
        let mut bank = MemoryBank::new(8);
        bank.push(1.0, DVector::from_vec(vec![1.0]));
        let reps = DMatrix::from_row_slice(2, 1, &[0.3, 0.9]);
        let adjusted = label_orthogonal_adjust(&reps, &[1.0, -1.0], &mut bank).unwrap();
        assert_abs_diff_eq!(adjusted[(0, 0)], 0.3 - 1.0, epsilon = 1e-15);
        assert_eq!(adjusted[(1, 0)], 0.9);
        assert_eq!(bank.missing_class_passthroughs, 1);
    }

    #[test]
    fn adjusted_batch_centers_on_bank_means() {
        let mut rng = stream_rng(7, 72);
        let reps = DMatrix::from_fn(12, 3, |_, _| rng.random::<f64>());
        let labels: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut bank = MemoryBank::new(64);
        for i in 0..12 {
            bank.push(labels[i], reps.row(i).transpose());
        }
        let adjusted = label_orthogonal_adjust(&reps, &labels, &mut bank).unwrap();
        for class in [1.0, -1.0] {
            let mut mean = DVector::<f64>::zeros(3);
            let mut count = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y == class {
                    mean += adjusted.row(i).transpose();
                    count += 1.0;
                }
            }
            mean /= count;
            assert!(mean.amax() <= 1e-12);
        }
    }

    // ---- probes ----

    #[test]
    fn separable_features_fit_perfectly() {
        let features = DMatrix::from_column_slice(6, 1, &[-2.0, -1.5, -1.0, 1.0, 1.5, 2.0]);
        let y = [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        for method in [ProbeMethod::LeastSquares, ProbeMethod::Logistic] {
            let (_, err) = fit_linear_probe(&features, &y, method).unwrap();
            assert_eq!(err, 0.0, "{method:?}");
        }
    }

    #[test]
    fn zero_features_cannot_beat_chance() {
        let features = DMatrix::<f64>::zeros(6, 2);
        let y = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        for method in [ProbeMethod::LeastSquares, ProbeMethod::Logistic] {
            let (_, err) = fit_linear_probe(&features, &y, method).unwrap();
            assert!(err >= 0.5, "{method:?}: {err}");
        }
    }

    #[test]
    fn least_squares_probe_matches_normal_equations() {
        let mut rng = stream_rng(8, 73);
        let features = DMatrix::from_fn(12, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y: Vec<f64> = (0..12).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 }).collect();
        let (_, err) = fit_linear_probe(&features, &y, ProbeMethod::LeastSquares).unwrap();
        let yv = DVector::from_vec(y.clone());
        let gram = features.transpose() * &features;
        let w = gram
            .pseudo_inverse(1e-12)
            .unwrap()
            * features.transpose()
            * yv;
        let mut direct = 0.0;
        for i in 0..12 {
            let s: f64 = features.row(i).transpose().dot(&w);
            if s * y[i] <= 0.0 {
                direct += 1.0 / 12.0;
            }
        }
        assert_abs_diff_eq!(err, direct, epsilon = 1e-12);
    }

    // ---- training ----

    fn toy_setup(
        model: &AugmentationModel,
        ystar: &LabelFunction,
    ) -> (Vec<(Input, Input)>, Vec<Input>, Vec<f64>) {
        let source = ModelPairSource::new(model, Some(ystar), 64);
        let mut rng = stream_rng(99, 74);
        let (val_pairs, _) = source.draw_batch(32, &mut rng);
        let probe_inputs: Vec<Input> = (0..model.n_inputs())
            .map(|i| {
                Input::Dense(
                    model
                        .input_points()
                        .expect("points")
                        .row(i)
                        .iter()
                        .cloned()
                        .collect(),
                )
            })
            .collect();
        (val_pairs, probe_inputs, ystar.values().to_vec())
    }

    fn cube_model(seed: u64) -> (AugmentationModel, LabelFunction) {
        let cfg = HypercubeConfig {
            dim_d: 4,
            label_dim_k: 1,
            classifier_w: vec![1.0],
            seed,
            tau_levels_q: 2,
        };
        let model = discretize_hypercube(&cfg, 16, seed).unwrap();
        let labels: Vec<f64> = (0..16)
            .map(|i| model.input_points().unwrap()[(i, 0)])
            .collect();
        let ystar = LabelFunction::new(crate::losses::LabelDomain::Inputs, labels).unwrap();
        (model, ystar)
    }

    fn base_cfg() -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::Adam,
            lr: 0.01,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 16,
            epochs: 5,
            grad_clip_norm: None,
            loss: LossSpec::SpectralSampled,
            seed: 11,
            label_orthogonal: false,
            memory_bank_size: 256,
            patience: None,
        }
    }

    #[test]
    fn zero_lr_training_is_a_flat_noop() {
        let (model, ystar) = cube_model(0);
        let source = ModelPairSource::new(&model, Some(&ystar), 64);
        let (val_pairs, probe_inputs, probe_labels) = toy_setup(&model, &ystar);
        let eval = Evaluator {
            val_pairs,
            val_labels: None,
            probe_inputs,
            probe_labels,
            probe_classes: 2,
            loss: LossSpec::SpectralSampled,
        };
        let mut rep = TrainableRep::new_linear(4, 2, 12);
        let before = rep.params().to_vec();
        let mut cfg = base_cfg();
        cfg.lr = 0.0;
        let traj = train_contrastive(&source, &mut rep, &cfg, &eval).unwrap();
        assert_eq!(rep.params(), &before[..]);
        let first = &traj.rows[0];
        for row in &traj.rows {
            assert_eq!(row.cont_val_loss.to_bits(), first.cont_val_loss.to_bits());
            assert_eq!(row.downstream_acc.to_bits(), first.downstream_acc.to_bits());
        }
    }

    #[test]
    fn fixed_seed_runs_are_bitwise_identical() {
        let (model, ystar) = cube_model(1);
        let source = ModelPairSource::new(&model, Some(&ystar), 64);
        let (val_pairs, probe_inputs, probe_labels) = toy_setup(&model, &ystar);
        let eval = Evaluator {
            val_pairs,
            val_labels: None,
            probe_inputs,
            probe_labels,
            probe_classes: 2,
            loss: LossSpec::SpectralSampled,
        };
        let cfg = base_cfg();
        let mut rep_a = TrainableRep::new_linear(4, 2, 13);
        let mut rep_b = rep_a.clone();
        let ta = train_contrastive(&source, &mut rep_a, &cfg, &eval).unwrap();
        let tb = train_contrastive(&source, &mut rep_b, &cfg, &eval).unwrap();
        assert_eq!(ta.to_csv_deterministic(), tb.to_csv_deterministic());
        for (pa, pb) in rep_a.params().iter().zip(rep_b.params()) {
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
    }

    #[test]
    fn decay_keeps_trained_norm_below_the_decay_free_twin() {
        let model = {
            let cfg = HypercubeConfig {
                dim_d: 3,
                label_dim_k: 1,
                classifier_w: vec![1.0],
                seed: 2,
                tau_levels_q: 2,
            };
            discretize_hypercube(&cfg, 8, 2).unwrap()
        };
        let source = ModelPairSource::new(&model, None, 16);
        let mut rng = stream_rng(3, 75);
        let (val_pairs, _) = source.draw_batch(8, &mut rng);
        let eval = Evaluator {
            val_pairs,
            val_labels: None,
            probe_inputs: vec![Input::Dense(vec![1.0, 1.0, 1.0]); 4],
            probe_labels: vec![1.0, -1.0, 1.0, -1.0],
            probe_classes: 2,
            loss: LossSpec::SpectralSampled,
        };
        // Same seed, same data stream, decay on versus off.
        let mut decayed = TrainableRep::new_linear(3, 2, 14);
        let mut cfg = base_cfg();
        cfg.weight_decay = 0.05;
        cfg.epochs = 6;
        train_contrastive(&source, &mut decayed, &cfg, &eval).unwrap();
        let mut twin = TrainableRep::new_linear(3, 2, 14);
        let mut no_decay = cfg.clone();
        no_decay.weight_decay = 0.0;
        train_contrastive(&source, &mut twin, &no_decay, &eval).unwrap();
        let norm = |r: &TrainableRep| r.params().iter().map(|p| p * p).sum::<f64>().sqrt();
        assert!(norm(&decayed) < norm(&twin));
    }

    #[test]
    fn pure_decay_is_monotone_on_zero_gradient() {
        // Direct check of the update rule: zero gradient, decay only.
        let mut rep = TrainableRep::new_linear(3, 2, 15);
        let cfg = TrainConfig { weight_decay: 0.1, ..base_cfg() };
        let mut m = vec![0.0; rep.params().len()];
        let mut v = vec![0.0; rep.params().len()];
        let mut prev = f64::INFINITY;
        for step in 1..=20 {
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for j in 0..rep.params().len() {
                m[j] = cfg.beta1 * m[j];
                v[j] = cfg.beta2 * v[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                rep.params_mut()[j] -= cfg.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                rep.params_mut()[j] -= cfg.lr * cfg.weight_decay * rep.params_mut()[j];
            }
            let norm = rep.params().iter().map(|p| p * p).sum::<f64>().sqrt();
            assert!(norm < prev);
            prev = norm;
        }
    }

    #[test]
    fn nan_parameters_abort_with_epoch() {
        let (model, ystar) = cube_model(3);
        let source = ModelPairSource::new(&model, Some(&ystar), 64);
        let (val_pairs, probe_inputs, probe_labels) = toy_setup(&model, &ystar);
        let eval = Evaluator {
            val_pairs,
            val_labels: None,
            probe_inputs,
            probe_labels,
            probe_classes: 2,
            loss: LossSpec::SpectralSampled,
        };
        let mut rep = TrainableRep::new_linear(4, 2, 16);
        rep.params_mut()[0] = f64::NAN;
        let cfg = base_cfg();
        match train_contrastive(&source, &mut rep, &cfg, &eval) {
            Err(Error::NumericAbort { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn patience_stops_a_flat_run_early() {
        let (model, ystar) = cube_model(4);
        let source = ModelPairSource::new(&model, Some(&ystar), 64);
        let (val_pairs, probe_inputs, probe_labels) = toy_setup(&model, &ystar);
        let eval = Evaluator {
            val_pairs,
            val_labels: None,
            probe_inputs,
            probe_labels,
            probe_classes: 2,
            loss: LossSpec::SpectralSampled,
        };
        let mut rep = TrainableRep::new_linear(4, 2, 17);
        let mut cfg = base_cfg();
        cfg.lr = 0.0;
        cfg.epochs = 30;
        cfg.patience = Some(3);
        let traj = train_contrastive(&source, &mut rep, &cfg, &eval).unwrap();
        // Epoch 1 sets the best; three stalls end the run at epoch 4.
        assert_eq!(traj.rows.len(), 4);
    }

    #[test]
    fn spectral_training_approaches_the_in_class_optimum() {
        let (model, ystar) = cube_model(5);
        let graph = build_matrices(&model).unwrap();
        let phi = FeatureMatrix::new(model.aug_points().unwrap().clone()).unwrap();
        let optimum = optimal_in_linear_class(&graph, &phi, 2).unwrap();

        let source = ModelPairSource::new(&model, Some(&ystar), 256);
        let (val_pairs, probe_inputs, probe_labels) = toy_setup(&model, &ystar);
        let eval = Evaluator {
            val_pairs,
            val_labels: None,
            probe_inputs,
            probe_labels,
            probe_classes: 2,
            loss: LossSpec::SpectralSampled,
        };
        let mut rep = TrainableRep::new_linear(4, 2, 18);
        let mut cfg = base_cfg();
        cfg.epochs = 120;
        cfg.batch_size = 32;
        cfg.lr = 0.02;
        train_contrastive(&source, &mut rep, &cfg, &eval).unwrap();

        // Exact population loss of the trained weights against the optimum.
        let w = DMatrix::from_fn(4, 2, |i, j| rep.params()[i * 2 + j]);
        let f = crate::losses::RepMatrix::new(phi.values() * w).unwrap();
        let trained = crate::losses::spectral_loss_exact(&graph, &f).unwrap();
        assert!(
            trained <= optimum.min_loss + 0.05,
            "trained {trained} vs optimum {}",
            optimum.min_loss
        );
    }

    #[test]
    fn trajectory_csv_shape() {
        let t = Trajectory {
            rows: vec![TrajectoryRow {
                epoch: 1,
                cont_val_loss: -0.5,
                downstream_acc: 0.75,
                wall_seconds: 0.1234,
            }],
        };
        let csv = t.to_csv();
        assert!(csv.starts_with("epoch,cont_val_loss,downstream_acc,wall_seconds\n"));
        assert!(csv.contains("1,-0.5,0.75,0.123\n"));
        assert_eq!(
            t.to_csv_deterministic(),
            "epoch,cont_val_loss,downstream_acc\n1,-0.5,0.75\n"
        );
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = base_cfg();
        cfg.lr = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.loss = LossSpec::Simclr { temperature: 0.5, normalize: true };
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.loss = LossSpec::Simclr { temperature: 0.0, normalize: true };
        assert!(cfg.validate().is_err());
        let mut cfg = base_cfg();
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
    }
}
