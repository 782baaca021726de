//! Spurious minimizers: representations whose contrastive loss is as good as
//! a given one while the linear probe does no better than chance.
//!
//! The construction has three parts. First, collapse each input's
//! augmentations to their conditional mean embedding, which never increases
//! the loss. Second, permute which input gets which mean; under a uniform
//! input marginal the loss cannot see the permutation. Third, search over
//! permutations for one that ruins the probe. Search certifies by
//! construction: the returned (permutation, probe error) pair is evaluated
//! exactly, not inferred from a counting argument.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::augmodel::AugmentationModel;
use crate::error::{Error, Result};
use crate::losses::{
    averaged_representation, clf_loss, LabelDomain, LabelFunction, ProbeSpec, RepMatrix,
};

/// Per-input block values must agree within this for a rep to count as
/// collapsed.
const BLOCK_TOL: f64 = 1e-9;
/// Input marginal entries may deviate from 1/N by at most this.
const UNIFORM_TOL: f64 = 1e-9;
/// Random restarts in the permutation search.
const RESTARTS: usize = 16;

// ============================================================================
// Permutation plumbing
// ============================================================================

/// A collapsed representation together with the input permutation (and
/// optionally a per-augmentation slot map carrying within-block variation).
#[derive(Debug, Clone)]
pub struct PermutedRep {
    pub base: RepMatrix,
    pub perm: Vec<usize>,
    /// When present, augmentation x of input i takes the row of the
    /// augmentation holding the same slot in input perm(i)'s block, so the
    /// embedding multiset moves wholesale instead of block means.
    pub seed_map: Option<Vec<usize>>,
}

impl PermutedRep {
    pub fn materialize(&self, model: &AugmentationModel) -> Result<RepMatrix> {
        match &self.seed_map {
            None => permute_embeddings(model, &self.base, &self.perm),
            Some(slots) => apply_seed_map(model, &self.base, &self.perm, slots),
        }
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidArgument(format!(
            "permutation has {} entries for {n} inputs",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidArgument(
                "permutation is not a bijection on the input indices".into(),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Space-separated single-line form, the on-disk permutation format.
pub fn perm_to_line(perm: &[usize]) -> String {
    perm.iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn perm_from_line(line: &str) -> Result<Vec<usize>> {
    let perm: Vec<usize> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|e| Error::InvalidArgument(format!("bad permutation entry {t:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    check_perm(&perm, perm.len())?;
    Ok(perm)
}

fn require_disjoint(model: &AugmentationModel) -> Result<()> {
    if !model.is_disjoint() {
        return Err(Error::InvalidArgument(
            "model is not disjoint: augmentation supports of distinct inputs intersect, \
             so augmentations do not identify their input and the block construction \
             is unavailable"
                .into(),
        ));
    }
    Ok(())
}

fn require_uniform_marginal(model: &AugmentationModel) -> Result<()> {
    let n = model.n_inputs() as f64;
    for &w in model.input_marginal() {
        if (w - 1.0 / n).abs() > UNIFORM_TOL {
            return Err(Error::InvalidArgument(
                "loss invariance under input permutations needs a uniform input marginal".into(),
            ));
        }
    }
    Ok(())
}

/// Which input owns each augmentation (None for zero-mass columns).
fn owner_map(model: &AugmentationModel) -> Vec<Option<usize>> {
    let mut owners = vec![None; model.n_augs()];
    for i in 0..model.n_inputs() {
        for x in 0..model.n_augs() {
            if model.cond()[(i, x)] > 0.0 {
                owners[x] = Some(i);
            }
        }
    }
    owners
}

/// One row per input, read off the block-constant collapsed rep.
fn block_values(model: &AugmentationModel, collapsed: &RepMatrix) -> Result<DMatrix<f64>> {
    let owners = owner_map(model);
    let d = collapsed.dim_d();
    let mut vals = DMatrix::<f64>::zeros(model.n_inputs(), d);
    let mut found = vec![false; model.n_inputs()];
    for (x, owner) in owners.iter().enumerate() {
        let Some(i) = *owner else { continue };
        if found[i] {
            for j in 0..d {
                if (vals[(i, j)] - collapsed.values()[(x, j)]).abs() > BLOCK_TOL {
                    return Err(Error::InvalidArgument(
                        "representation is not constant on each input's augmentation block; \
                         collapse it first"
                            .into(),
                    ));
                }
            }
        } else {
            for j in 0..d {
                vals[(i, j)] = collapsed.values()[(x, j)];
            }
            found[i] = true;
        }
    }
    Ok(vals)
}

// ============================================================================
// Operations
// ============================================================================

/// Replace every augmentation's embedding by its input's conditional mean.
/// Only meaningful on disjoint models, where each augmentation belongs to
/// exactly one block; the loss never increases.
pub fn collapse_to_means(model: &AugmentationModel, rep: &RepMatrix) -> Result<RepMatrix> {
    require_disjoint(model)?;
    if rep.n_rows() != model.n_augs() {
        return Err(Error::DimensionMismatch(format!(
            "rep has {} rows, model has {} augmentations",
            rep.n_rows(),
            model.n_augs()
        )));
    }
    let means = averaged_representation(model, rep)?;
    let owners = owner_map(model);
    let mut out = rep.values().clone();
    for (x, owner) in owners.iter().enumerate() {
        if let Some(i) = *owner {
            for j in 0..rep.dim_d() {
                out[(x, j)] = means[(i, j)];
            }
        }
    }
    RepMatrix::new(out)
}

/// Reassign block values by an input permutation: augmentations of input i
/// take input perm(i)'s collapsed value. Uniform input marginal required.
pub fn permute_embeddings(
    model: &AugmentationModel,
    collapsed: &RepMatrix,
    perm: &[usize],
) -> Result<RepMatrix> {
    require_disjoint(model)?;
    require_uniform_marginal(model)?;
    check_perm(perm, model.n_inputs())?;
    if collapsed.n_rows() != model.n_augs() {
        return Err(Error::DimensionMismatch(format!(
            "rep has {} rows, model has {} augmentations",
            collapsed.n_rows(),
            model.n_augs()
        )));
    }
    let vals = block_values(model, collapsed)?;
    let owners = owner_map(model);
    let mut out = collapsed.values().clone();
    for (x, owner) in owners.iter().enumerate() {
        if let Some(i) = *owner {
            for j in 0..collapsed.dim_d() {
                out[(x, j)] = vals[(perm[i], j)];
            }
        }
    }
    RepMatrix::new(out)
}

/// Slot-preserving permutation of uncollapsed blocks: augmentation at slot s
/// of input i's block takes the row at slot s of input perm(i)'s block.
/// Blocks must have equal sizes; with matched conditional weights this
/// transports the whole embedding multiset, the normalized-case analogue of
/// permuting block means.
pub fn permute_with_seed_map(
    model: &AugmentationModel,
    rep: &RepMatrix,
    perm: &[usize],
) -> Result<PermutedRep> {
    require_disjoint(model)?;
    require_uniform_marginal(model)?;
    check_perm(perm, model.n_inputs())?;
    let owners = owner_map(model);
    let mut slots = vec![0usize; model.n_augs()];
    let mut counts = vec![0usize; model.n_inputs()];
    for (x, owner) in owners.iter().enumerate() {
        if let Some(i) = *owner {
            slots[x] = counts[i];
            counts[i] += 1;
        }
    }
    let per = counts[0];
    if counts.iter().any(|&c| c != per) {
        return Err(Error::InvalidArgument(
            "seed-map permutation needs equal augmentation counts per input".into(),
        ));
    }
    Ok(PermutedRep {
        base: rep.clone(),
        perm: perm.to_vec(),
        seed_map: Some(slots),
    })
}

fn apply_seed_map(
    model: &AugmentationModel,
    rep: &RepMatrix,
    perm: &[usize],
    slots: &[usize],
) -> Result<RepMatrix> {
    let owners = owner_map(model);
    // Augmentation index per (input, slot).
    let per = slots.iter().max().map_or(0, |m| m + 1);
    let mut by_slot = vec![usize::MAX; model.n_inputs() * per];
    for (x, owner) in owners.iter().enumerate() {
        if let Some(i) = *owner {
            by_slot[i * per + slots[x]] = x;
        }
    }
    let mut out = rep.values().clone();
    for (x, owner) in owners.iter().enumerate() {
        if let Some(i) = *owner {
            let src = by_slot[perm[i] * per + slots[x]];
            for j in 0..rep.dim_d() {
                out[(x, j)] = rep.values()[(src, j)];
            }
        }
    }
    RepMatrix::new(out)
}

// ============================================================================
// Adversarial search
// ============================================================================

/// Outcome of the bad-permutation search.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub perm: Vec<usize>,
    /// Exact probe error of the permuted representation under the default
    /// least-squares probe.
    pub probe_error: f64,
    pub evaluations: usize,
    /// Set when ystar was unbalanced; the search proceeds anyway.
    pub unbalanced_warning: bool,
    /// Error of always answering the majority class, reported for context
    /// when ystar is unbalanced.
    pub majority_baseline: Option<f64>,
}

/// Greedy search for a permutation maximizing the probe error of the
/// permuted representation. 16 restarts (the first from the identity, the
/// rest from uniform shuffles), each improved by best pair swaps until no
/// swap helps; `budget` caps the number of probe evaluations. The result is
/// never worse than the identity permutation's error.
pub fn search_bad_permutation(
    model: &AugmentationModel,
    collapsed: &RepMatrix,
    ystar: &LabelFunction,
    budget: usize,
    rng: &mut impl Rng,
) -> Result<SearchOutcome> {
    if budget == 0 {
        return Err(Error::InvalidArgument(
            "search budget must be at least one probe evaluation".into(),
        ));
    }
    require_disjoint(model)?;
    require_uniform_marginal(model)?;
    if ystar.domain() != LabelDomain::Inputs || ystar.values().len() != model.n_inputs() {
        return Err(Error::InvalidArgument(
            "ystar must label the model's inputs".into(),
        ));
    }
    // Fails fast on non-block-constant reps before we burn budget.
    block_values(model, collapsed)?;

    let n = model.n_inputs();
    let unbalanced = !ystar.balanced();
    let majority_baseline = if unbalanced {
        let plus: f64 = ystar
            .values()
            .iter()
            .zip(model.input_marginal())
            .filter(|(y, _)| **y > 0.0)
            .map(|(_, w)| *w)
            .sum();
        Some(plus.min(1.0 - plus))
    } else {
        None
    };

    let mut evaluations = 0usize;
    let evaluate = |perm: &[usize], evaluations: &mut usize| -> Result<f64> {
        *evaluations += 1;
        let rep = permute_embeddings(model, collapsed, perm)?;
        clf_loss(model, &rep, ystar, ProbeSpec::LeastSquares)
    };

    let mut best_perm: Vec<usize> = (0..n).collect();
    let mut best_err = evaluate(&best_perm, &mut evaluations)?;

    'restarts: for restart in 0..RESTARTS {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut err = if restart == 0 {
            best_err
        } else {
            if evaluations >= budget {
                break;
            }
            perm.shuffle(rng);
            evaluate(&perm, &mut evaluations)?
        };
        if err > best_err {
            best_err = err;
            best_perm = perm.clone();
        }
        // Best-swap hill climb on probe error.
        loop {
            let mut swap: Option<(usize, usize, f64)> = None;
            for a in 0..n {
                for b in (a + 1)..n {
                    if evaluations >= budget {
                        if let Some((sa, sb, se)) = swap {
                            if se > err {
                                perm.swap(sa, sb);
                                if se > best_err {
                                    best_err = se;
                                    best_perm = perm.clone();
                                }
                            }
                        }
                        break 'restarts;
                    }
                    perm.swap(a, b);
                    let e = evaluate(&perm, &mut evaluations)?;
                    perm.swap(a, b);
                    if swap.as_ref().is_none_or(|&(_, _, se)| e > se) {
                        swap = Some((a, b, e));
                    }
                }
            }
            match swap {
                Some((a, b, e)) if e > err => {
                    perm.swap(a, b);
                    err = e;
                    if err > best_err {
                        best_err = err;
                        best_perm = perm.clone();
                    }
                }
                _ => break,
            }
        }
    }

    Ok(SearchOutcome {
        perm: best_perm,
        probe_error: best_err,
        evaluations,
        unbalanced_warning: unbalanced,
        majority_baseline,
    })
}

// ============================================================================
// Tests
// ============================================================================
