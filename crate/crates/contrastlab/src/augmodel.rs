//! Finite augmentation models.
//!
//! An augmentation model is the full joint description of a self-supervised
//! data distribution over finitely many inputs and augmentations: a marginal
//! over the N inputs, an N x M conditional table giving the augmentation
//! distribution of each input, and optional real coordinates for both sides.
//! Everything downstream (adjacency matrices, losses, bounds) is computed
//! from this object, so it is deliberately explicit and immutable.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Row sums further than this from 1 are rejected instead of renormalized.
/// Tolerates text-serialization rounding, nothing more.
const ROW_SUM_TOL: f64 = 1e-9;

// ============================================================================
// Model type
// ============================================================================

/// A finite augmentation model.
///
/// Immutable after construction; sampling takes caller-owned generators, so
/// sharing a model across threads read-only is safe.
#[derive(Debug, Clone)]
pub struct AugmentationModel {
    n_inputs: usize,
    n_augs: usize,
    input_marginal: Vec<f64>,
    /// N x M, row i is the augmentation distribution of input i.
    cond: DMatrix<f64>,
    /// Derived augmentation marginal, cached at build time.
    aug_marginal: Vec<f64>,
    /// M x p coordinates, one row per augmentation, when augmentations are numeric.
    aug_points: Option<DMatrix<f64>>,
    /// N x q coordinates, one row per input.
    input_points: Option<DMatrix<f64>>,
    // Cumulative tables for sampling, built once.
    input_cdf: Vec<f64>,
    row_cdf: Vec<f64>,
    aug_cdf: Vec<f64>,
}

/// Parameters of the scaled-tail hypercube family.
///
/// Inputs live on {-1,+1}^dim_d; the label is the sign of a linear function
/// of the first `label_dim_k` coordinates; augmentation scales the remaining
/// coordinates by a random level tau drawn from a grid of `tau_levels_q`
/// midpoints in (0,1].
#[derive(Debug, Clone)]
pub struct HypercubeConfig {
    pub dim_d: usize,
    pub label_dim_k: usize,
    pub classifier_w: Vec<f64>,
    pub seed: u64,
    pub tau_levels_q: usize,
}

impl HypercubeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.label_dim_k == 0 || self.label_dim_k >= self.dim_d {
            return Err(Error::InvalidArgument(format!(
                "label_dim_k must satisfy 1 <= k < dim_d, got k={} D={}",
                self.label_dim_k, self.dim_d
            )));
        }
        if self.classifier_w.len() != self.label_dim_k {
            return Err(Error::InvalidArgument(format!(
                "classifier_w has length {}, expected {}",
                self.classifier_w.len(),
                self.label_dim_k
            )));
        }
        if self.classifier_w.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidArgument(
                "classifier_w must be non-zero".into(),
            ));
        }
        if self.tau_levels_q == 0 {
            return Err(Error::InvalidArgument(
                "tau_levels_q must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

// ============================================================================
// Construction
// ============================================================================

/// Validate raw probabilities and assemble a model.
///
/// Negative entries and zero-sum rows are rejected; rows whose sum is within
/// 1e-9 of 1 are renormalized silently. `points` are per-augmentation
/// coordinates (M rows).
pub fn build_finite_model(
    input_marginal: Vec<f64>,
    cond: DMatrix<f64>,
    points: Option<DMatrix<f64>>,
) -> Result<AugmentationModel> {
    let n = input_marginal.len();
    let m = cond.ncols();
    if n == 0 || m == 0 {
        return Err(Error::InvalidModel(
            "model needs at least one input and one augmentation".into(),
        ));
    }
    if cond.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "cond has {} rows for {} inputs",
            cond.nrows(),
            n
        )));
    }
    if let Some(p) = &points {
        if p.nrows() != m {
            return Err(Error::DimensionMismatch(format!(
                "points has {} rows for {} augmentations",
                p.nrows(),
                m
            )));
        }
    }

    let input_marginal = normalize_row(&input_marginal, "input marginal")?;
    let mut cond = cond;
    for i in 0..n {
        let row: Vec<f64> = cond.row(i).iter().cloned().collect();
        let row = normalize_row(&row, &format!("conditional row {i}"))?;
        for (j, v) in row.into_iter().enumerate() {
            cond[(i, j)] = v;
        }
    }

    // Derived augmentation marginal: D_X(x) = sum_i D_Xbar(i) cond[i][x].
    let mut aug_marginal = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            aug_marginal[j] += input_marginal[i] * cond[(i, j)];
        }
    }

    let input_cdf = cumulative(&input_marginal);
    let mut row_cdf = Vec::with_capacity(n * m);
    for i in 0..n {
        let row: Vec<f64> = cond.row(i).iter().cloned().collect();
        row_cdf.extend(cumulative(&row));
    }
    let aug_cdf = cumulative(&aug_marginal);

    Ok(AugmentationModel {
        n_inputs: n,
        n_augs: m,
        input_marginal,
        cond,
        aug_marginal,
        aug_points: points,
        input_points: None,
        input_cdf,
        row_cdf,
        aug_cdf,
    })
}

fn normalize_row(row: &[f64], what: &str) -> Result<Vec<f64>> {
    for (j, &v) in row.iter().enumerate() {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::InvalidModel(format!(
                "negative probability {v} at position {j} of {what}"
            )));
        }
    }
    let sum: f64 = row.iter().sum();
    if sum == 0.0 {
        return Err(Error::InvalidModel(format!("{what} sums to zero")));
    }
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::InvalidModel(format!(
            "{what} sums to {sum}, not 1"
        )));
    }
    Ok(row.iter().map(|&v| v / sum).collect())
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(p.len());
    for &v in p {
        acc += v;
        out.push(acc);
    }
    // Force the final entry so u in [0,1) always lands inside.
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

fn sample_cdf(cdf: &[f64], u: f64) -> usize {
    // First index with cdf > u; zero-mass entries are never selected because
    // their cumulative value equals their predecessor's.
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Discretize the scaled-tail hypercube family onto a finite model.
///
/// Inputs are drawn uniformly without replacement from {-1,+1}^D; each gets
/// `Q = cfg.tau_levels_q` augmentations, one per grid level
/// tau_q = (q - 0.5)/Q, q = 1..Q. The first k coordinates are copied
/// unchanged and the tail is scaled by tau_q, so sign(x) recovers the input
/// exactly (tau is never 0) and the model is disjoint by construction.
pub fn discretize_hypercube(
    cfg: &HypercubeConfig,
    n_inputs: usize,
    rng_seed: u64,
) -> Result<AugmentationModel> {
    cfg.validate()?;
    if n_inputs == 0 {
        return Err(Error::InvalidArgument(
            "hypercube model needs at least one input".into(),
        ));
    }
    let d = cfg.dim_d;
    let k = cfg.label_dim_k;
    let q_levels = cfg.tau_levels_q;
    if d < 64 && n_inputs > (1usize << d) {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n_inputs} distinct inputs from a {d}-cube"
        )));
    }

    let mut rng = stream_rng(rng_seed, 0);
    let signs = sample_distinct_sign_vectors(d, n_inputs, &mut rng);

    let mut input_points = DMatrix::zeros(n_inputs, d);
    for (i, s) in signs.iter().enumerate() {
        for j in 0..d {
            input_points[(i, j)] = s[j];
        }
    }

    let m = n_inputs * q_levels;
    let mut aug_points = DMatrix::zeros(m, d);
    let mut cond = DMatrix::zeros(n_inputs, m);
    for i in 0..n_inputs {
        for q in 0..q_levels {
            let tau = (q as f64 + 0.5) / q_levels as f64;
            let col = i * q_levels + q;
            for j in 0..k {
                aug_points[(col, j)] = input_points[(i, j)];
            }
            for j in k..d {
                aug_points[(col, j)] = tau * input_points[(i, j)];
            }
            cond[(i, col)] = 1.0 / q_levels as f64;
        }
    }

    let marginal = vec![1.0 / n_inputs as f64; n_inputs];
    let mut model = build_finite_model(marginal, cond, Some(aug_points))?;
    model.input_points = Some(input_points);
    Ok(model)
}

fn sample_distinct_sign_vectors(d: usize, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if d <= 20 {
        // Small cube: enumerate, shuffle, take a prefix.
        let total = 1usize << d;
        let mut codes: Vec<usize> = (0..total).collect();
        codes.shuffle(rng);
        codes
            .into_iter()
            .take(n)
            .map(|c| {
                (0..d)
                    .map(|j| if (c >> j) & 1 == 1 { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect()
    } else {
        // Large cube: rejection sampling on packed bit keys; collisions are
        // vanishingly rare at the scales we use (n << 2^D).
        let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut key = vec![0u8; d.div_ceil(8)];
            let mut v = Vec::with_capacity(d);
            for j in 0..d {
                let bit = rng.random_bool(0.5);
                if bit {
                    key[j / 8] |= 1 << (j % 8);
                }
                v.push(if bit { 1.0 } else { -1.0 });
            }
            if seen.insert(key) {
                out.push(v);
            }
        }
        out
    }
}

/// Force disjoint supports by splitting every shared augmentation.
///
/// Each nonzero (input, augmentation) entry becomes its own augmentation
/// whose point is the original coordinates (or a one-hot stub when the model
/// has none) with one extra coordinate equal to the input index scaled to
/// [0,1]. Probability structure is unchanged, so conditionals and the input
/// marginal carry over; the result is disjoint by construction.
pub fn tag_with_identity(model: &AugmentationModel) -> AugmentationModel {
    let n = model.n_inputs;
    let m = model.n_augs;
    let id_scale = (n.max(2) - 1) as f64;

    // Nonzero entries in row-major order fix the new augmentation indexing.
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if model.cond[(i, j)] > 0.0 {
                entries.push((i, j));
            }
        }
    }

    let old_dim = model.aug_points.as_ref().map_or(m, |p| p.ncols());
    let mut cond = DMatrix::zeros(n, entries.len());
    let mut points = DMatrix::zeros(entries.len(), old_dim + 1);
    for (col, &(i, j)) in entries.iter().enumerate() {
        cond[(i, col)] = model.cond[(i, j)];
        match &model.aug_points {
            Some(p) => {
                for c in 0..old_dim {
                    points[(col, c)] = p[(j, c)];
                }
            }
            None => points[(col, j)] = 1.0,
        }
        points[(col, old_dim)] = i as f64 / id_scale;
    }

    let mut tagged = build_finite_model(model.input_marginal.clone(), cond, Some(points))
        .expect("tagged model preserves a valid probability structure");
    tagged.input_points = model.input_points.clone();
    tagged
}

/// Random fully-supported model; every augmentation is shared by all inputs.
pub fn random_overlapping_model(n_inputs: usize, n_augs: usize, rng_seed: u64) -> AugmentationModel {
    let mut rng = stream_rng(rng_seed, 1);
    let marginal = random_positive_dist(n_inputs, &mut rng);
    let mut cond = DMatrix::zeros(n_inputs, n_augs);
    for i in 0..n_inputs {
        let row = random_positive_dist(n_augs, &mut rng);
        for j in 0..n_augs {
            cond[(i, j)] = row[j];
        }
    }
    build_finite_model(marginal, cond, None).expect("generated rows are normalized")
}

/// Random block model: input i owns augmentations [i*per, (i+1)*per).
pub fn random_disjoint_model(
    n_inputs: usize,
    augs_per_input: usize,
    rng_seed: u64,
) -> AugmentationModel {
    let mut rng = stream_rng(rng_seed, 2);
    let m = n_inputs * augs_per_input;
    let marginal = random_positive_dist(n_inputs, &mut rng);
    let mut cond = DMatrix::zeros(n_inputs, m);
    for i in 0..n_inputs {
        let row = random_positive_dist(augs_per_input, &mut rng);
        for j in 0..augs_per_input {
            cond[(i, i * augs_per_input + j)] = row[j];
        }
    }
    build_finite_model(marginal, cond, None).expect("generated rows are normalized")
}

fn random_positive_dist(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    // Bounded away from zero so no entry underflows to a degenerate weight.
    let raw: Vec<f64> = (0..len).map(|_| 0.05 + rng.random::<f64>()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

// ============================================================================
// Accessors and queries
// ============================================================================

impl AugmentationModel {
    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_augs(&self) -> usize {
        self.n_augs
    }

    pub fn input_marginal(&self) -> &[f64] {
        &self.input_marginal
    }

    pub fn aug_marginal(&self) -> &[f64] {
        &self.aug_marginal
    }

    /// N x M conditional table; row i is A(.|xbar_i).
    pub fn cond(&self) -> &DMatrix<f64> {
        &self.cond
    }

    pub fn aug_points(&self) -> Option<&DMatrix<f64>> {
        self.aug_points.as_ref()
    }

    pub fn input_points(&self) -> Option<&DMatrix<f64>> {
        self.input_points.as_ref()
    }

    /// Attach per-input coordinates (N rows).
    pub fn with_input_points(mut self, points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() != self.n_inputs {
            return Err(Error::DimensionMismatch(format!(
                "input points has {} rows for {} inputs",
                points.nrows(),
                self.n_inputs
            )));
        }
        self.input_points = Some(points);
        Ok(self)
    }

    /// True iff no augmentation carries positive mass under two inputs.
    pub fn is_disjoint(&self) -> bool {
        for j in 0..self.n_augs {
            let owners = (0..self.n_inputs)
                .filter(|&i| self.cond[(i, j)] > 0.0)
                .count();
            if owners > 1 {
                return false;
            }
        }
        true
    }

    /// Draw (x, x+) by sampling an input from its marginal, then two
    /// independent augmentations from that input's conditional.
    pub fn sample_similar_pair(&self, rng: &mut impl Rng) -> (usize, usize) {
        let i = sample_cdf(&self.input_cdf, rng.random::<f64>());
        let row = &self.row_cdf[i * self.n_augs..(i + 1) * self.n_augs];
        let a = sample_cdf(row, rng.random::<f64>());
        let b = sample_cdf(row, rng.random::<f64>());
        (a, b)
    }

    /// Draw a negative from the augmentation marginal.
    pub fn sample_negative(&self, rng: &mut impl Rng) -> usize {
        sample_cdf(&self.aug_cdf, rng.random::<f64>())
    }

    /// Exact similar-pair joint: J(x,x') = sum_i D_Xbar(i) cond[i][x] cond[i][x'].
    pub fn similar_pair_joint(&self) -> DMatrix<f64> {
        let mut joint = DMatrix::zeros(self.n_augs, self.n_augs);
        for i in 0..self.n_inputs {
            let w = self.input_marginal[i];
            for a in 0..self.n_augs {
                let pa = self.cond[(i, a)];
                if pa == 0.0 {
                    continue;
                }
                for b in 0..self.n_augs {
                    joint[(a, b)] += w * pa * self.cond[(i, b)];
                }
            }
        }
        joint
    }
}

// ============================================================================
// Serialization
// ============================================================================

impl AugmentationModel {
    /// Serialize to the line-oriented `augmodel v1` format.
    ///
    /// Layout: header `augmodel v1 N M has_points`, N marginal lines, one
    /// `i j p` triple per nonzero conditional entry, then M coordinate lines
    /// when points are present. Floats are printed in shortest round-trip
    /// form, so save/load is value-exact. Input-side coordinates are not part
    /// of the format.
    pub fn to_format_string(&self) -> String {
        let has_points = usize::from(self.aug_points.is_some());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "augmodel v1 {} {} {}",
            self.n_inputs, self.n_augs, has_points
        );
        for w in &self.input_marginal {
            let _ = writeln!(out, "{w}");
        }
        for i in 0..self.n_inputs {
            for j in 0..self.n_augs {
                let p = self.cond[(i, j)];
                if p != 0.0 {
                    let _ = writeln!(out, "{i} {j} {p}");
                }
            }
        }
        if let Some(points) = &self.aug_points {
            for r in 0..points.nrows() {
                let line: Vec<String> =
                    (0..points.ncols()).map(|c| points[(r, c)].to_string()).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_format_string())?;
        Ok(())
    }

    pub fn from_format_string(text: &str) -> Result<AugmentationModel> {
        // Keep original line numbers for error reporting, drop blank lines.
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        let (header_no, header) = *lines.first().ok_or(Error::Parse {
            line: 1,
            detail: "empty model file".into(),
        })?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 5 || toks[0] != "augmodel" || toks[1] != "v1" {
            return Err(Error::Parse {
                line: header_no,
                detail: "expected header `augmodel v1 N M has_points`".into(),
            });
        }
        let n: usize = parse_tok(toks[2], header_no, "N")?;
        let m: usize = parse_tok(toks[3], header_no, "M")?;
        let has_points: usize = parse_tok(toks[4], header_no, "has_points")?;
        if has_points > 1 {
            return Err(Error::Parse {
                line: header_no,
                detail: format!("has_points must be 0 or 1, got {has_points}"),
            });
        }

        let body = &lines[1..];
        let point_lines = has_points * m;
        let triples = body
            .len()
            .checked_sub(n + point_lines)
            .ok_or(Error::Parse {
                line: header_no,
                detail: format!(
                    "file has {} data lines, need at least {}",
                    body.len(),
                    n + point_lines
                ),
            })?;

        let mut marginal = Vec::with_capacity(n);
        for &(no, l) in &body[..n] {
            marginal.push(parse_float_line(l, no)?);
        }

        let mut cond = DMatrix::zeros(n, m);
        let mut filled: HashSet<(usize, usize)> = HashSet::new();
        for &(no, l) in &body[n..n + triples] {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 3 {
                return Err(Error::Parse {
                    line: no,
                    detail: format!("expected `i j p` triple, got {} tokens", t.len()),
                });
            }
            let i: usize = parse_tok(t[0], no, "input index")?;
            let j: usize = parse_tok(t[1], no, "augmentation index")?;
            let p: f64 = parse_tok(t[2], no, "probability")?;
            if i >= n || j >= m {
                return Err(Error::Parse {
                    line: no,
                    detail: format!("entry ({i},{j}) outside {n}x{m} table"),
                });
            }
            if !filled.insert((i, j)) {
                return Err(Error::Parse {
                    line: no,
                    detail: format!("duplicate entry ({i},{j})"),
                });
            }
            cond[(i, j)] = p;
        }

        let points = if has_points == 1 {
            let rows: Vec<Vec<f64>> = body[n + triples..]
                .iter()
                .map(|&(no, l)| {
                    l.split_whitespace()
                        .map(|t| parse_tok::<f64>(t, no, "coordinate"))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let dim = rows[0].len();
            for (idx, r) in rows.iter().enumerate() {
                if r.len() != dim {
                    return Err(Error::Parse {
                        line: body[n + triples + idx].0,
                        detail: format!("point has {} coordinates, expected {dim}", r.len()),
                    });
                }
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            Some(DMatrix::from_row_slice(m, dim, &flat))
        } else {
            None
        };

        build_finite_model(marginal, cond, points)
    }

    pub fn load(path: &Path) -> Result<AugmentationModel> {
        let text = std::fs::read_to_string(path)?;
        Self::from_format_string(&text)
    }
}

fn parse_tok<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        detail: format!("cannot parse {what} from `{tok}`"),
    })
}

fn parse_float_line(l: &str, no: usize) -> Result<f64> {
    let toks: Vec<&str> = l.split_whitespace().collect();
    if toks.len() != 1 {
        return Err(Error::Parse {
            line: no,
            detail: format!("expected one value, got {}", toks.len()),
        });
    }
    parse_tok(toks[0], no, "marginal value")
}

// ============================================================================
// Tests
// ============================================================================
