//! Sign-hypercube laboratory: the one worked example where every spectral
//! quantity has a closed form.
//!
//! Inputs are uniform sign vectors in {-1,+1}^D; an augmentation keeps the
//! first k coordinates and scales the tail by a shared factor tau drawn
//! uniformly from (0,1]. The label is the sign of a fixed linear functional
//! of the first k coordinates. Feature covariances, class eigenvalues, and
//! the transfer bound are all analytic here, which makes the module double
//! as an oracle for the rest of the crate: trained arms, the spurious
//! construction, and the label-orthogonal mode are compared against exact
//! spectral optima.

use nalgebra::{DMatrix, DVector, QR};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::augmodel::{discretize_hypercube, AugmentationModel, HypercubeConfig};
use crate::bounds::hypercube_bound;
use crate::error::{Error, Result};
use crate::linalg::lstsq_matrix;
use crate::losses::{clf_loss, LabelDomain, LabelFunction, ProbeSpec, RepMatrix};
use crate::rng::stream_rng;
use crate::solver::{optimal_unconstrained, suboptimality, FeatureMatrix};
use crate::spectral::{build_matrices, SpectralGraph};
use crate::spurious::{collapse_to_means, permute_embeddings};
use crate::trainers::{
    train_contrastive, Evaluator, Input, LossSpec, Optimizer, PairSource, TrainConfig,
    TrainableRep, Trajectory,
};

const W_STAR_STREAM: u64 = 6;
const VAL_STREAM: u64 = 7;
const PROBE_STREAM: u64 = 8;
const SPUR_PERM_STREAM: u64 = 9;
const MC_STREAM: u64 = 10;

// ============================================================================
// Instances
// ============================================================================

/// A concrete problem instance: dimensions plus the labeling vector w*.
#[derive(Debug, Clone)]
pub struct Instance {
    cfg: HypercubeConfig,
}

/// Draw w* with k standard normal coefficients. Deterministic per seed.
pub fn make_instance(dim_d: usize, label_k: usize, seed: u64) -> Result<Instance> {
    if label_k == 0 || label_k >= dim_d {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k < D, got k={label_k} D={dim_d}"
        )));
    }
    let mut rng = stream_rng(seed, W_STAR_STREAM);
    let w: Vec<f64> = (0..label_k)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Instance::with_w(dim_d, w, seed)
}

impl Instance {
    /// Instance with an explicit labeling vector (length k).
    pub fn with_w(dim_d: usize, classifier_w: Vec<f64>, seed: u64) -> Result<Instance> {
        let cfg = HypercubeConfig {
            dim_d,
            label_dim_k: classifier_w.len(),
            classifier_w,
            seed,
            tau_levels_q: 1,
        };
        cfg.validate()?;
        Ok(Instance { cfg })
    }

    pub fn dim_d(&self) -> usize {
        self.cfg.dim_d
    }

    pub fn label_k(&self) -> usize {
        self.cfg.label_dim_k
    }

    pub fn w_star(&self) -> &[f64] {
        &self.cfg.classifier_w
    }

    /// Label of a point: sign of w* against the first k coordinates, with
    /// an exact zero resolved to +1.
    pub fn label_point(&self, x: &[f64]) -> f64 {
        let dot: f64 = self
            .w_star()
            .iter()
            .zip(x)
            .map(|(w, xi)| w * xi)
            .sum();
        if dot >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform sign vector.
    pub fn sample_input(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim_d())
            .map(|_| if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 })
            .collect()
    }

    /// One augmentation: first k coordinates kept, tail scaled by a single
    /// tau uniform on (0,1] (never exactly zero, so signs are recoverable).
    pub fn augment(&self, x_bar: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let tau = 1.0 - rng.random::<f64>();
        let k = self.label_k();
        x_bar
            .iter()
            .enumerate()
            .map(|(j, &v)| if j < k { v } else { tau * v })
            .collect()
    }
}

/// Continuous-tau pair stream over an instance, for the training loop.
pub struct CubePairSource {
    pub instance: Instance,
    pub epoch_pairs: usize,
}

impl PairSource for CubePairSource {
    fn epoch_len(&self) -> usize {
        self.epoch_pairs
    }

    fn draw_batch(&self, b: usize, rng: &mut ChaCha8Rng) -> (Vec<(Input, Input)>, Vec<f64>) {
        let mut pairs = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let x_bar = self.instance.sample_input(rng);
            let a = self.instance.augment(&x_bar, rng);
            let b2 = self.instance.augment(&x_bar, rng);
            labels.push(self.instance.label_point(&x_bar));
            pairs.push((Input::Dense(a), Input::Dense(b2)));
        }
        (pairs, labels)
    }
}

// ============================================================================
// Closed-form spectral objects
// ============================================================================

/// Diagonals of the identity-feature covariances in the continuous-tau
/// limit: E[x x^T] = diag(1_k, 1/3) and E[x_bar-averaged outer product]
/// = diag(1_k, 1/4).
pub fn closed_form_covariances(dim_d: usize, label_k: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    if label_k >= dim_d {
        return Err(Error::InvalidArgument(format!(
            "need k < D, got k={label_k} D={dim_d}"
        )));
    }
    let sigma_phi = DVector::from_fn(dim_d, |j, _| if j < label_k { 1.0 } else { 1.0 / 3.0 });
    let sigma_phibar = DVector::from_fn(dim_d, |j, _| if j < label_k { 1.0 } else { 0.25 });
    Ok((sigma_phi, sigma_phibar))
}

/// Second moment of tau on the Q-level grid tau_q = (q - 0.5)/Q.
pub fn grid_tau_second_moment(q_levels: usize) -> f64 {
    let q = q_levels as f64;
    1.0 / 3.0 - 1.0 / (12.0 * q * q)
}

/// Covariance diagonals for the Q-level discretization. The conditional
/// mean of tau is exactly 1/2 for every Q, so only the raw second moment
/// moves with Q.
pub fn discretized_covariances(
    dim_d: usize,
    label_k: usize,
    q_levels: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (mut sigma_phi, sigma_phibar) = closed_form_covariances(dim_d, label_k)?;
    let m2 = grid_tau_second_moment(q_levels);
    for j in label_k..dim_d {
        sigma_phi[j] = m2;
    }
    Ok((sigma_phi, sigma_phibar))
}

/// Class eigenvalue of the tail directions at Q grid levels; converges to
/// 1/4 like 1/Q^2.
pub fn lambda_noise(q_levels: usize) -> f64 {
    1.0 - 0.25 / grid_tau_second_moment(q_levels)
}

/// Augmentations drawn per input inside `mc_covariances`. Averaging the
/// corruption draws per input is what makes the derived spectrum usable
/// at moderate sample counts: the sign noise common to both estimates
/// cancels in the whitened operator, so the corruption noise dominates,
/// and it shrinks with every extra draw.
const MC_AUGS: usize = 8;

/// Monte Carlo estimates of the two covariances from `samples` input
/// draws. Each input gets MC_AUGS augmentations: the feature covariance
/// averages their self products, and the averaged-feature covariance
/// averages the cross products of distinct draws, unbiased because
/// augmentations are conditionally independent given the input. The
/// cross-pair sum is formed as S S' minus the self products, with S the
/// per-input sum of augmentations.
pub fn mc_covariances(
    dim_d: usize,
    label_k: usize,
    samples: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let instance = Instance::with_w(dim_d, vec![1.0; label_k.max(1)], seed)?;
    let mut rng = stream_rng(seed, MC_STREAM);
    let mut selfs = DMatrix::<f64>::zeros(dim_d, dim_d);
    let mut sums = DMatrix::<f64>::zeros(dim_d, dim_d);
    let mut s = vec![0.0; dim_d];
    for _ in 0..samples {
        let x_bar = instance.sample_input(&mut rng);
        s.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..MC_AUGS {
            let x = instance.augment(&x_bar, &mut rng);
            for i in 0..dim_d {
                for j in i..dim_d {
                    selfs[(i, j)] += x[i] * x[j];
                }
                s[i] += x[i];
            }
        }
        for i in 0..dim_d {
            for j in i..dim_d {
                sums[(i, j)] += s[i] * s[j];
            }
        }
    }
    let phi_scale = 1.0 / (samples * MC_AUGS) as f64;
    let pair_scale = 1.0 / (samples * MC_AUGS * (MC_AUGS - 1)) as f64;
    let mut sigma_phi = DMatrix::<f64>::zeros(dim_d, dim_d);
    let mut sigma_phibar = DMatrix::<f64>::zeros(dim_d, dim_d);
    for i in 0..dim_d {
        for j in i..dim_d {
            sigma_phi[(i, j)] = selfs[(i, j)] * phi_scale;
            sigma_phi[(j, i)] = sigma_phi[(i, j)];
            sigma_phibar[(i, j)] = (sums[(i, j)] - selfs[(i, j)]) * pair_scale;
            sigma_phibar[(j, i)] = sigma_phibar[(i, j)];
        }
    }
    Ok((sigma_phi, sigma_phibar))
}

// ============================================================================
// Discretized models and the transfer bound
// ============================================================================

/// A finite model sampled from an instance, with everything the bound
/// check needs precomputed.
pub struct DiscretizedCube {
    pub instance: Instance,
    pub model: AugmentationModel,
    pub graph: SpectralGraph,
    pub phi: FeatureMatrix,
    pub ystar: LabelFunction,
}

/// Sample `n_inputs` distinct sign vectors and discretize tau to Q levels.
pub fn discretized_cube(
    dim_d: usize,
    label_k: usize,
    q_levels: usize,
    n_inputs: usize,
    seed: u64,
) -> Result<DiscretizedCube> {
    let instance = make_instance(dim_d, label_k, seed)?;
    discretize_instance(&instance, q_levels, n_inputs, seed)
}

/// Discretize an existing instance (keeps its w*).
pub fn discretize_instance(
    instance: &Instance,
    q_levels: usize,
    n_inputs: usize,
    seed: u64,
) -> Result<DiscretizedCube> {
    let mut cfg = instance.cfg.clone();
    cfg.tau_levels_q = q_levels;
    let model = discretize_hypercube(&cfg, n_inputs, seed)?;
    let graph = build_matrices(&model)?;
    let points = model
        .aug_points()
        .expect("hypercube models always carry augmentation points");
    let phi = FeatureMatrix::new(points.clone())?;
    let input_points = model.input_points().expect("input points present");
    let labels: Vec<f64> = (0..n_inputs)
        .map(|i| {
            let row: Vec<f64> = input_points.row(i).iter().cloned().collect();
            instance.label_point(&row)
        })
        .collect();
    let ystar = LabelFunction::new(LabelDomain::Inputs, labels)?;
    Ok(DiscretizedCube {
        instance: instance.clone(),
        model,
        graph,
        phi,
        ystar,
    })
}

/// Verdict of one transfer-bound check.
#[derive(Debug, Clone, Copy)]
pub struct BoundCheck {
    /// Probe error of the representation.
    pub lhs: f64,
    /// 32 k epsilon.
    pub rhs: f64,
    /// Suboptimality against the exact in-class optimum at the rep's dim.
    pub epsilon: f64,
    pub holds: bool,
}

/// Check the hypercube transfer bound for one in-class representation:
/// probe error <= 32 k epsilon + 1e-6. The representation must lie in the
/// span of the identity features (rows linear in the augmentation points).
pub fn verify_hypercube_bound(cube: &DiscretizedCube, rep: &RepMatrix) -> Result<BoundCheck> {
    let k = cube.instance.label_k();
    if rep.dim_d() < k {
        return Err(Error::InvalidArgument(format!(
            "representation dimension {} is below k={k}",
            rep.dim_d()
        )));
    }
    let w = lstsq_matrix(cube.phi.values(), rep.values());
    let residual = (cube.phi.values() * &w - rep.values()).amax();
    let scale = rep.values().amax().max(1.0);
    if residual > 1e-6 * scale {
        return Err(Error::InvalidArgument(format!(
            "representation is not in the feature span (residual {residual:.3e})"
        )));
    }
    let sub = suboptimality(&cube.graph, rep, Some(&cube.phi))?;
    let epsilon = sub.epsilon.max(0.0);
    let rhs = hypercube_bound(k, epsilon)?;
    let lhs = clf_loss(&cube.model, rep, &cube.ystar, ProbeSpec::LeastSquares)?;
    Ok(BoundCheck {
        lhs,
        rhs,
        epsilon,
        holds: lhs <= rhs + 1e-6,
    })
}

// ============================================================================
// Experiment arms
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    LinearSpectral,
    LinearSimclr,
    Mlp2Adam,
    Mlp2Sgd,
    Spurious,
    LabelOrthogonal,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::LinearSpectral => "linear-spectral",
            Arm::LinearSimclr => "linear-simclr",
            Arm::Mlp2Adam => "mlp2-adam",
            Arm::Mlp2Sgd => "mlp2-sgd",
            Arm::Spurious => "spurious",
            Arm::LabelOrthogonal => "label-orthogonal",
        }
    }

    pub fn from_name(name: &str) -> Result<Arm> {
        Arm::all()
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Arm::all().iter().map(|a| a.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown arm `{name}` ({})",
                    known.join(", ")
                ))
            })
    }

    pub fn all() -> Vec<Arm> {
        vec![
            Arm::LinearSpectral,
            Arm::LinearSimclr,
            Arm::Mlp2Adam,
            Arm::Mlp2Sgd,
            Arm::Spurious,
            Arm::LabelOrthogonal,
        ]
    }
}

/// Full experiment description. `bench()` is the reference configuration
/// (D=50, k=10, hidden 100, d=20, batch 512, 500 epochs, 50000/12500
/// split); `quick()` keeps the architecture and optimizers but shrinks the
/// sample counts so a full sweep fits in minutes on one core.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dim_d: usize,
    pub label_k: usize,
    pub hidden: usize,
    pub rep_dim: usize,
    /// Training pairs consumed per epoch.
    pub n_train: usize,
    /// Held-out validation pairs, drawn once per seed.
    pub n_val: usize,
    /// Clean probe points for downstream accuracy.
    pub n_probe: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_lr: f64,
    pub sgd_lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub memory_bank: usize,
    /// Input count for the spurious arm's discretized subsample.
    pub spurious_inputs: usize,
    pub spurious_q: usize,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
}

impl ExperimentConfig {
    pub fn bench() -> Self {
        ExperimentConfig {
            dim_d: 50,
            label_k: 10,
            hidden: 100,
            rep_dim: 20,
            n_train: 50000,
            n_val: 12500,
            n_probe: 2048,
            epochs: 500,
            batch_size: 512,
            adam_lr: 1e-3,
            sgd_lr: 1e-2,
            weight_decay: 0.004,
            temperature: 0.5,
            memory_bank: 10240,
            spurious_inputs: 512,
            spurious_q: 8,
            seeds: vec![0, 1, 2, 3, 4],
            arms: Arm::all(),
        }
    }

    /// Same problem and architecture as `bench`, scaled down so the whole
    /// sweep runs in minutes: fewer pairs per epoch and fewer epochs.
    pub fn quick() -> Self {
        ExperimentConfig {
            n_train: 4096,
            n_val: 1024,
            n_probe: 1024,
            epochs: 100,
            spurious_inputs: 512,
            spurious_q: 2,
            ..Self::bench()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_probe == 0 {
            return Err(Error::InvalidArgument(
                "n_train, n_val, n_probe must be positive".into(),
            ));
        }
        if self.seeds.is_empty() || self.arms.is_empty() {
            return Err(Error::InvalidArgument("need at least one seed and one arm".into()));
        }
        if self.rep_dim < self.label_k {
            return Err(Error::InvalidArgument(
                "rep_dim below label_k cannot carry the label subspace".into(),
            ));
        }
        Ok(())
    }
}

/// One (arm, seed) outcome.
#[derive(Debug, Clone)]
pub struct ArmRecord {
    pub arm: Arm,
    pub seed: u64,
    pub final_cont_loss: f64,
    pub final_acc: f64,
}

/// Per-arm aggregate over seeds; `se_*` are standard errors of the mean.
#[derive(Debug, Clone)]
pub struct ArmStats {
    pub arm: Arm,
    pub n: usize,
    pub mean_cont_loss: f64,
    pub se_cont_loss: f64,
    pub mean_acc: f64,
    pub se_acc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResults {
    /// Sorted by (arm name, seed); identical across reruns.
    pub records: Vec<ArmRecord>,
    pub trajectories: Vec<(Arm, u64, Trajectory)>,
}

impl ExperimentResults {
    pub fn to_summary_csv(&self) -> String {
        let mut out = String::from("arm,seed,final_cont_loss,final_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.arm.name(),
                r.seed,
                r.final_cont_loss,
                r.final_acc
            ));
        }
        out
    }

    pub fn aggregate(&self) -> Vec<ArmStats> {
        let mut arms: Vec<Arm> = Vec::new();
        for r in &self.records {
            if !arms.contains(&r.arm) {
                arms.push(r.arm);
            }
        }
        arms.sort_by_key(|a| a.name());
        arms.into_iter()
            .map(|arm| {
                let losses: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.arm == arm)
                    .map(|r| r.final_cont_loss)
                    .collect();
                let accs: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.arm == arm)
                    .map(|r| r.final_acc)
                    .collect();
                let (ml, sl) = mean_se(&losses);
                let (ma, sa) = mean_se(&accs);
                ArmStats {
                    arm,
                    n: losses.len(),
                    mean_cont_loss: ml,
                    se_cont_loss: sl,
                    mean_acc: ma,
                    se_acc: sa,
                }
            })
            .collect()
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("arm,n,mean_cont_loss,se_cont_loss,mean_acc,se_acc\n");
        for s in self.aggregate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.arm.name(),
                s.n,
                s.mean_cont_loss,
                s.se_cont_loss,
                s.mean_acc,
                s.se_acc
            ));
        }
        out
    }

    pub fn stats_for(&self, arm: Arm) -> Option<ArmStats> {
        self.aggregate().into_iter().find(|s| s.arm == arm)
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn arm_train_config(cfg: &ExperimentConfig, arm: Arm, seed: u64) -> TrainConfig {
    let spectral = LossSpec::SpectralSampled;
    let simclr = LossSpec::Simclr {
        temperature: cfg.temperature,
        normalize: true,
    };
    let base = TrainConfig {
        optimizer: Optimizer::Adam,
        lr: cfg.adam_lr,
        weight_decay: cfg.weight_decay,
        beta1: 0.9,
        beta2: 0.99,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        grad_clip_norm: None,
        loss: spectral,
        seed,
        label_orthogonal: false,
        memory_bank_size: cfg.memory_bank,
        patience: None,
    };
    match arm {
        Arm::LinearSpectral | Arm::Mlp2Adam => base,
        Arm::LinearSimclr => TrainConfig { loss: simclr, ..base },
        // Raw SGD on the unbounded-below objective needs its steps capped;
        // the clip value is the same one the text pipeline uses.
        Arm::Mlp2Sgd => TrainConfig {
            optimizer: Optimizer::Sgd,
            lr: cfg.sgd_lr,
            weight_decay: 0.0,
            grad_clip_norm: Some(2.5),
            ..base
        },
        Arm::LabelOrthogonal => TrainConfig {
            label_orthogonal: true,
            ..base
        },
        Arm::Spurious => base,
    }
}

fn probe_set(cfg: &ExperimentConfig, instance: &Instance, seed: u64) -> (Vec<Input>, Vec<f64>) {
    let mut rng = stream_rng(seed, PROBE_STREAM);
    let mut inputs = Vec::with_capacity(cfg.n_probe);
    let mut labels = Vec::with_capacity(cfg.n_probe);
    for _ in 0..cfg.n_probe {
        let x = instance.sample_input(&mut rng);
        labels.push(instance.label_point(&x));
        inputs.push(Input::Dense(x));
    }
    (inputs, labels)
}

fn run_trained_arm(
    cfg: &ExperimentConfig,
    arm: Arm,
    seed: u64,
) -> Result<(ArmRecord, Trajectory)> {
    let instance = make_instance(cfg.dim_d, cfg.label_k, seed)?;
    let source = CubePairSource {
        instance: instance.clone(),
        epoch_pairs: cfg.n_train,
    };
    let mut vrng = stream_rng(seed, VAL_STREAM);
    let (val_pairs, val_labels) = source.draw_batch(cfg.n_val, &mut vrng);
    let (probe_inputs, probe_labels) = probe_set(cfg, &instance, seed);
    let tc = arm_train_config(cfg, arm, seed);
    let eval = Evaluator {
        val_pairs,
        val_labels: if arm == Arm::LabelOrthogonal {
            Some(val_labels)
        } else {
            None
        },
        probe_inputs,
        probe_labels,
        probe_classes: 2,
        loss: tc.loss,
    };
    let mut rep = match arm {
        Arm::LinearSpectral | Arm::LinearSimclr => {
            TrainableRep::new_linear(cfg.dim_d, cfg.rep_dim, seed)
        }
        _ => TrainableRep::new_mlp2(cfg.dim_d, cfg.hidden, cfg.rep_dim, seed),
    };
    let trajectory = train_contrastive(&source, &mut rep, &tc, &eval)?;
    let last = trajectory
        .final_row()
        .ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
    Ok((
        ArmRecord {
            arm,
            seed,
            final_cont_loss: last.cont_val_loss,
            final_acc: last.downstream_acc,
        },
        trajectory,
    ))
}

/// Spurious arm: exact unconstrained optimum on a discretized subsample,
/// collapsed to per-input means and scrambled by a uniform random input
/// permutation. Loss is exact (not sampled) and preserved to 1e-9.
fn run_spurious_arm(cfg: &ExperimentConfig, seed: u64) -> Result<ArmRecord> {
    let instance = make_instance(cfg.dim_d, cfg.label_k, seed)?;
    let cube = discretize_instance(&instance, cfg.spurious_q, cfg.spurious_inputs, seed)?;
    let best = optimal_unconstrained(&cube.graph, cfg.rep_dim)?;
    let n = cube.model.n_inputs();
    // The top eigenvalue of a disjoint subsample is n-fold degenerate, and
    // the eigensolver's basis for it is indicator-like: only rep_dim inputs
    // would get nonzero embeddings. Any orthonormal recombination of the
    // tied directions is an equally optimal representation, so draw a random
    // one; it gives every input a distinct embedding while the exact-loss
    // check below still has to come out at the unconstrained minimum.
    let full = optimal_unconstrained(&cube.graph, n)?;
    let mut rng = stream_rng(seed, SPUR_PERM_STREAM);
    let gauss = DMatrix::<f64>::from_fn(n, cfg.rep_dim, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        g
    });
    let spread = RepMatrix::new(full.f_opt.values() * QR::new(gauss).q())?;
    let collapsed = collapse_to_means(&cube.model, &spread)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let permuted = permute_embeddings(&cube.model, &collapsed, &perm)?;
    let loss_collapsed = crate::losses::spectral_loss_exact(&cube.graph, &collapsed)?;
    let loss_permuted = crate::losses::spectral_loss_exact(&cube.graph, &permuted)?;
    if (loss_collapsed - loss_permuted).abs() > 1e-9 {
        return Err(Error::NumericAbort {
            epoch: 0,
            detail: format!(
                "permutation changed the exact loss by {:.3e}",
                (loss_collapsed - loss_permuted).abs()
            ),
        });
    }
    if (loss_permuted - best.min_loss).abs() > 1e-9 {
        return Err(Error::NumericAbort {
            epoch: 0,
            detail: format!(
                "scrambled optimum drifted {:.3e} off the unconstrained minimum",
                (loss_permuted - best.min_loss).abs()
            ),
        });
    }
    let err = clf_loss(&cube.model, &permuted, &cube.ystar, ProbeSpec::LeastSquares)?;
    Ok(ArmRecord {
        arm: Arm::Spurious,
        seed,
        final_cont_loss: loss_permuted,
        final_acc: 1.0 - err,
    })
}

/// Final (loss, accuracy) for the same linear representation trained twice
/// on a dictator instance, once plainly and once with per-class mean removal.
#[derive(Debug, Clone, Copy)]
pub struct LabelOrthogonalContrast {
    pub standard_loss: f64,
    pub standard_acc: f64,
    pub adjusted_loss: f64,
    pub adjusted_acc: f64,
}

/// Train a linear representation on `cfg`'s instance with and without the
/// per-class mean adjustment and report both endpoints.
///
/// The contrast is sharpest on a dictator instance (label_k = 1): there the
/// label is a single coordinate, so it is constant within each class and
/// the centered loss is exactly indifferent to it. Training then has no
/// reason to keep that direction in the representation, the probe loses its
/// signal, and yet only one of rep_dim directions is given up, so the loss
/// stays close to the plain run's. With a wider label block the label is a
/// nonlinear function of coordinates the loss still wants, and centering
/// removes only their between-class mean, so both runs score alike.
pub fn label_orthogonal_contrast(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<LabelOrthogonalContrast> {
    cfg.validate()?;
    let mut out = [(0.0, 0.0); 2];
    for (slot, adjusted) in [(0, false), (1, true)] {
        let instance = make_instance(cfg.dim_d, cfg.label_k, seed)?;
        let source = CubePairSource {
            instance: instance.clone(),
            epoch_pairs: cfg.n_train,
        };
        let mut tc = arm_train_config(cfg, Arm::LinearSpectral, seed);
        tc.label_orthogonal = adjusted;
        let mut vrng = stream_rng(seed, VAL_STREAM);
        let (val_pairs, val_labels) = source.draw_batch(cfg.n_val, &mut vrng);
        let (probe_inputs, probe_labels) = probe_set(cfg, &instance, seed);
        let eval = Evaluator {
            val_pairs,
            val_labels: if adjusted { Some(val_labels) } else { None },
            probe_inputs,
            probe_labels,
            probe_classes: 2,
            loss: tc.loss,
        };
        let mut rep = TrainableRep::new_linear(cfg.dim_d, cfg.rep_dim, seed);
        let trajectory = train_contrastive(&source, &mut rep, &tc, &eval)?;
        let last = trajectory
            .final_row()
            .ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
        out[slot] = (last.cont_val_loss, last.downstream_acc);
    }
    Ok(LabelOrthogonalContrast {
        standard_loss: out[0].0,
        standard_acc: out[0].1,
        adjusted_loss: out[1].0,
        adjusted_acc: out[1].1,
    })
}

/// Run every (arm, seed) cell serially and merge by key. Serial execution
/// keeps the output reduction-order deterministic on any machine; results
/// are keyed so a parallel driver would produce the same table.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let mut results = ExperimentResults::default();
    for &arm in &cfg.arms {
        for &seed in &cfg.seeds {
            match arm {
                Arm::Spurious => {
                    results.records.push(run_spurious_arm(cfg, seed)?);
                }
                _ => {
                    let (record, trajectory) = run_trained_arm(cfg, arm, seed)?;
                    results.records.push(record);
                    results.trajectories.push((arm, seed, trajectory));
                }
            }
        }
    }
    results
        .records
        .sort_by(|a, b| (a.arm.name(), a.seed).cmp(&(b.arm.name(), b.seed)));
    results
        .trajectories
        .sort_by(|a, b| (a.0.name(), a.1).cmp(&(b.0.name(), b.1)));
    Ok(results)
}

// ============================================================================
// Tests
// ============================================================================
