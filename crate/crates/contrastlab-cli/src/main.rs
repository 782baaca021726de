//! `contrastlab` binary: file-driven front end for the laboratory crate.
//!
//! Six subcommands wire the library into reproducible runs: `analyze` reads
//! an augmentation model and writes its spectrum and a disjointness report,
//! `bound` evaluates a transfer bound in one of three modes, `hypercube`
//! runs the benchmark sweep, `spurious` searches for a loss-preserving but
//! probe-breaking input permutation, `text` trains a bag-of-words
//! representation on a corpus, and `train` fits a representation to any
//! model file.
//!
//! Every command takes `--out DIR` and writes `manifest.txt` there before
//! any computation output. The manifest records the command, config path,
//! seed, output directory, tool version, and a SHA-256 digest per input
//! file; all other outputs are deterministic functions of the inputs and the
//! seed, so rerunning with the same manifest inputs reproduces them byte for
//! byte (timing columns are omitted for exactly this reason).
//!
//! Randomness flows from the single `--seed` flag. The library splits seeds
//! into numbered streams (see the crate's rng module); streams 0-19 belong
//! to the library, the binary draws its own from 20 up: 20 for the spurious
//! permutation search and 21 for held-out validation pairs in `train`.
//!
//! Exit codes: 0 success (including `--help`), 1 bad input (unreadable or
//! malformed files, invalid flags), 2 numeric abort during training, 3
//! internal failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use contrastlab::augmodel::AugmentationModel;
use contrastlab::bounds::{fnclass_bound, haochen_bound, hypercube_bound, GStrategy};
use contrastlab::error::{Error, Result};
use contrastlab::hypercube::{run_experiment, Arm, ExperimentConfig};
use contrastlab::losses::{
    clf_loss, posterior_mode_labels, spectral_loss_exact, LabelDomain, LabelFunction, ProbeSpec,
    RepMatrix,
};
use contrastlab::rng::stream_rng;
use contrastlab::solver::FeatureMatrix;
use contrastlab::spectral::{bayes_error, build_matrices, eigengap_bound};
use contrastlab::spurious::{
    collapse_to_means, perm_to_line, permute_embeddings, search_bad_permutation,
};
use contrastlab::textlab::{run_text_experiment, synthetic_corpus, AugKind, Corpus};
use contrastlab::trainers::{
    train_contrastive, Evaluator, Input, LossSpec, ModelPairSource, Optimizer, PairSource,
    TrainConfig, TrainableRep,
};

/// Stream id for the spurious-search generator.
const SPURIOUS_SEARCH_STREAM: u64 = 20;
/// Stream id for the `train` command's held-out validation pairs.
const TRAIN_VAL_STREAM: u64 = 21;

/// Most eigengap bound rows an analyze report will list.
const MAX_REPORT_D: usize = 8;

// ============================================================================
// Command line
// ============================================================================

#[derive(Parser)]
#[command(
    name = "contrastlab",
    version,
    about = "Numerical laboratory for contrastive learning on finite augmentation graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Spectrum and disjointness report for a model file
    Analyze(AnalyzeArgs),
    /// Evaluate a downstream transfer bound
    Bound(BoundArgs),
    /// Run the hypercube benchmark sweep
    Hypercube(HypercubeArgs),
    /// Search for a loss-preserving permutation that breaks the probe
    Spurious(SpuriousArgs),
    /// Train a bag-of-words representation on a token corpus
    Text(TextArgs),
    /// Train a representation against any augmentation model file
    Train(TrainArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Augmentation model file (`augmodel v1` format)
    #[arg(long)]
    model: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    /// Bound flavor: graph spectrum (haochen), feature class (fnclass), or
    /// the closed hypercube form (hypercube)
    #[arg(long, value_parser = ["haochen", "fnclass", "hypercube"])]
    mode: String,
    /// Model file; required for haochen and fnclass
    #[arg(long)]
    model: Option<PathBuf>,
    /// Feature matrix file, one augmentation per row; fnclass only
    #[arg(long)]
    features: Option<PathBuf>,
    /// Input labels file (+-1 per line); fnclass only
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Representation dimension the bound is evaluated at
    #[arg(long)]
    d: Option<usize>,
    /// Intermediate dimension; defaults to d (haochen) or a minimizing
    /// search over 1..=d (fnclass)
    #[arg(long = "d-prime")]
    d_prime: Option<usize>,
    /// Suboptimality of the representation (epsilon)
    #[arg(long)]
    subopt: f64,
    /// How the augmentation labeling is chosen in fnclass mode
    #[arg(long, default_value = "propagate", value_parser = ["exact", "propagate"])]
    g: String,
    /// Explicit augmentation labeling file overriding --g; fnclass only
    #[arg(long = "g-labels")]
    g_labels: Option<PathBuf>,
    /// Augmentation-collision parameter of the haochen approximation term
    #[arg(long)]
    alpha: Option<f64>,
    /// Leading constant of the approximation term (haochen)
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
    /// Leading constant of the suboptimality term (haochen)
    #[arg(long, default_value_t = 1.0)]
    c2: f64,
    /// Number of label coordinates; hypercube mode only
    #[arg(long)]
    k: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HypercubeArgs {
    /// Baseline configuration to start from
    #[arg(long, default_value = "quick", value_parser = ["quick", "bench"])]
    preset: String,
    /// Flat `key = value` file overriding preset fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list overriding the preset seeds
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpuriousArgs {
    /// Disjoint augmentation model file with a uniform input marginal
    #[arg(long)]
    model: PathBuf,
    /// Representation file, one augmentation embedding per row
    #[arg(long)]
    rep: PathBuf,
    /// Input labels file (+-1 per line)
    #[arg(long)]
    labels: PathBuf,
    /// Probe evaluations the search may spend
    #[arg(long, default_value_t = 20000)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TextArgs {
    /// Corpus file: one `label<TAB>tokens` document per line
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Generate a block-vocabulary corpus instead of reading one
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long = "docs-per-class", default_value_t = 32)]
    docs_per_class: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long = "doc-len", default_value_t = 12)]
    doc_len: usize,
    /// Augmentation: drop, drop-permute, split, or split-full
    #[arg(long)]
    aug: String,
    /// Token drop probability; must be given even for the split augmentations
    #[arg(long = "p-drop")]
    p_drop: f64,
    #[arg(long = "rep-dim", default_value_t = 16)]
    rep_dim: usize,
    #[arg(long, default_value = "adam", value_parser = ["adam", "sgd"])]
    optimizer: String,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long = "weight-decay", default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long = "batch-size", default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Augmentation model file
    #[arg(long)]
    model: PathBuf,
    /// Input labels file (+-1 per line) for the downstream probe
    #[arg(long)]
    labels: PathBuf,
    /// Representation architecture
    #[arg(long, default_value = "linear", value_parser = ["linear", "mlp2"])]
    rep: String,
    /// Hidden width for mlp2
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long = "rep-dim", default_value_t = 8)]
    rep_dim: usize,
    /// Training loss
    #[arg(long, default_value = "spectral", value_parser = ["spectral", "simclr"])]
    loss: String,
    /// InfoNCE temperature (simclr loss only)
    #[arg(long, default_value_t = 0.5)]
    temperature: f64,
    #[arg(long, default_value = "adam", value_parser = ["adam", "sgd"])]
    optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long = "weight-decay", default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long = "batch-size", default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Pairs drawn per epoch
    #[arg(long = "epoch-pairs", default_value_t = 512)]
    epoch_pairs: usize,
    /// Held-out validation pairs
    #[arg(long = "n-val", default_value_t = 256)]
    n_val: usize,
    /// Gradient clipping threshold (off when absent)
    #[arg(long = "grad-clip")]
    grad_clip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

// ============================================================================
// Entry point and exit codes
// ============================================================================

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and succeed; real argument
            // errors are input errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(&cli.command))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Bound(a) => cmd_bound(a),
        Cmd::Hypercube(a) => cmd_hypercube(a),
        Cmd::Spurious(a) => cmd_spurious(a),
        Cmd::Text(a) => cmd_text(a),
        Cmd::Train(a) => cmd_train(a),
    }
}

/// 1 = input error, 2 = numeric abort; panics map to 3 in main.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NumericAbort { .. } => 2,
        _ => 1,
    }
}

// ============================================================================
// Manifest and input files
// ============================================================================

/// An input file held in memory together with its provenance.
struct InputFile {
    role: &'static str,
    path: PathBuf,
    text: String,
}

impl InputFile {
    fn read(role: &'static str, path: &Path) -> Result<InputFile> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::InvalidArgument(format!("cannot read {}: {e}", path.display()))
        })?;
        let text = String::from_utf8(bytes).map_err(|_| {
            Error::InvalidArgument(format!("{} is not valid UTF-8", path.display()))
        })?;
        Ok(InputFile { role, path: path.to_path_buf(), text })
    }

    fn sha256(&self) -> String {
        let digest = Sha256::digest(self.text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Prefix a library error with the file it came from.
fn in_file(path: &Path, err: Error) -> Error {
    Error::InvalidArgument(format!("{}: {err}", path.display()))
}

/// Identity of a run, written to `manifest.txt` before any other output.
struct RunManifest<'a> {
    command: &'static str,
    config: Option<&'a Path>,
    /// Rendered seed field; multi-seed commands list all of them.
    seed: Option<String>,
    out: &'a Path,
    inputs: &'a [InputFile],
}

impl RunManifest<'_> {
    fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(
            s,
            "config={}",
            self.config.map_or("-".into(), |p| p.display().to_string())
        );
        let _ = writeln!(s, "seed={}", self.seed.as_deref().unwrap_or("-"));
        let _ = writeln!(s, "out={}", self.out.display());
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        for f in self.inputs {
            let _ = writeln!(s, "input.{}.path={}", f.role, f.path.display());
            let _ = writeln!(s, "input.{}.sha256={}", f.role, f.sha256());
        }
        s
    }

    fn write(&self) -> Result<()> {
        std::fs::create_dir_all(self.out)?;
        std::fs::write(self.out.join("manifest.txt"), self.render())?;
        Ok(())
    }
}

fn write_output(out: &Path, name: &str, content: &str) -> Result<()> {
    std::fs::write(out.join(name), content)?;
    Ok(())
}

// ============================================================================
// Text file formats
// ============================================================================

/// Matrix file: whitespace-separated floats, one row per line. `#` starts a
/// comment; blank lines are skipped. All rows must have equal width.
fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::Parse {
                    line: idx + 1,
                    detail: format!("bad number {t:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            width = row.len();
        } else if row.len() != width {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("row has {} entries, expected {width}", row.len()),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 1, detail: "no data rows".into() });
    }
    let (n, m) = (rows.len(), width);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(n, m, &flat))
}

/// Labels file: a single value per line, same comment rules as matrices.
fn parse_labels(text: &str) -> Result<Vec<f64>> {
    let m = parse_matrix(text)?;
    if m.ncols() != 1 {
        return Err(Error::Parse {
            line: 1,
            detail: format!("labels need one value per line, found rows of {}", m.ncols()),
        });
    }
    Ok(m.column(0).iter().cloned().collect())
}

/// Flat `key = value` config lines, `#` comments; returns entries in file
/// order so later keys override earlier ones.
fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("expected `key = value`, got {line:?}"),
            });
        };
        entries.push((idx + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Parse {
        line,
        detail: format!("bad value for {key}: {e}"),
    })
}

fn parse_seed_list(spec: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = spec
        .split(',')
        .map(|t| {
            t.trim().parse::<u64>().map_err(|e| {
                Error::InvalidArgument(format!("bad seed {:?}: {e}", t.trim()))
            })
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("empty seed list".into()));
    }
    Ok(seeds)
}

/// Apply config-file overrides onto a preset experiment configuration.
fn apply_experiment_config(
    cfg: &mut ExperimentConfig,
    entries: &[(usize, String, String)],
) -> Result<()> {
    for (line, key, value) in entries {
        let (line, value) = (*line, value.as_str());
        match key.as_str() {
            "dim_d" => cfg.dim_d = parse_value(line, key, value)?,
            "label_k" => cfg.label_k = parse_value(line, key, value)?,
            "hidden" => cfg.hidden = parse_value(line, key, value)?,
            "rep_dim" => cfg.rep_dim = parse_value(line, key, value)?,
            "n_train" => cfg.n_train = parse_value(line, key, value)?,
            "n_val" => cfg.n_val = parse_value(line, key, value)?,
            "n_probe" => cfg.n_probe = parse_value(line, key, value)?,
            "epochs" => cfg.epochs = parse_value(line, key, value)?,
            "batch_size" => cfg.batch_size = parse_value(line, key, value)?,
            "adam_lr" => cfg.adam_lr = parse_value(line, key, value)?,
            "sgd_lr" => cfg.sgd_lr = parse_value(line, key, value)?,
            "weight_decay" => cfg.weight_decay = parse_value(line, key, value)?,
            "temperature" => cfg.temperature = parse_value(line, key, value)?,
            "memory_bank" => cfg.memory_bank = parse_value(line, key, value)?,
            "spurious_inputs" => cfg.spurious_inputs = parse_value(line, key, value)?,
            "spurious_q" => cfg.spurious_q = parse_value(line, key, value)?,
            "seeds" => {
                cfg.seeds = parse_seed_list(value).map_err(|e| Error::Parse {
                    line,
                    detail: e.to_string(),
                })?;
            }
            "arms" => {
                cfg.arms = value
                    .split(',')
                    .map(|t| {
                        Arm::from_name(t.trim()).map_err(|e| Error::Parse {
                            line,
                            detail: e.to_string(),
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            other => {
                return Err(Error::Parse {
                    line,
                    detail: format!("unknown key `{other}`"),
                });
            }
        }
    }
    Ok(())
}

fn parse_optimizer(name: &str) -> Optimizer {
    // clap restricts the value, so only the two names reach here.
    if name == "sgd" {
        Optimizer::Sgd
    } else {
        Optimizer::Adam
    }
}

// ============================================================================
// analyze
// ============================================================================

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let model_file = InputFile::read("model", &args.model)?;
    RunManifest {
        command: "analyze",
        config: None,
        seed: None,
        out: &args.out,
        inputs: std::slice::from_ref(&model_file),
    }
    .write()?;

    let model = AugmentationModel::from_format_string(&model_file.text)
        .map_err(|e| in_file(&args.model, e))?;
    let graph = build_matrices(&model)?;
    write_output(&args.out, "spectrum.csv", &graph.spectrum_csv())?;

    let n = model.n_inputs();
    let wmax = model.input_marginal().iter().cloned().fold(f64::MIN, f64::max);
    let wmin = model.input_marginal().iter().cloned().fold(f64::MAX, f64::min);
    let mut report = String::new();
    let _ = writeln!(report, "n_inputs={n}");
    let _ = writeln!(report, "n_augs={}", model.n_augs());
    let _ = writeln!(report, "is_disjoint={}", model.is_disjoint());
    let _ = writeln!(report, "bayes_error={}", bayes_error(&model));
    let _ = writeln!(report, "rho={}", wmax / wmin);
    for d in 1..=MAX_REPORT_D.min(n.saturating_sub(1)) {
        let _ = writeln!(report, "eigengap_bound_d{d}={}", eigengap_bound(&model, d)?);
    }
    write_output(&args.out, "report.txt", &report)
}

// ============================================================================
// bound
// ============================================================================

fn cmd_bound(args: &BoundArgs) -> Result<()> {
    let needs = |flag: &str| {
        Error::InvalidArgument(format!("mode {} needs --{flag}", args.mode))
    };

    // Gather the inputs this mode uses so the manifest lists exactly them.
    let mut inputs: Vec<InputFile> = Vec::new();
    if args.mode != "hypercube" {
        let path = args.model.as_ref().ok_or_else(|| needs("model"))?;
        inputs.push(InputFile::read("model", path)?);
    }
    if args.mode == "fnclass" {
        let path = args.features.as_ref().ok_or_else(|| needs("features"))?;
        inputs.push(InputFile::read("features", path)?);
        let path = args.labels.as_ref().ok_or_else(|| needs("labels"))?;
        inputs.push(InputFile::read("labels", path)?);
        if let Some(path) = &args.g_labels {
            inputs.push(InputFile::read("g_labels", path)?);
        }
    }
    RunManifest {
        command: "bound",
        config: None,
        seed: None,
        out: &args.out,
        inputs: &inputs,
    }
    .write()?;

    let find = |role: &str| inputs.iter().find(|f| f.role == role).expect("gathered above");
    let load_model = |f: &InputFile| -> Result<AugmentationModel> {
        AugmentationModel::from_format_string(&f.text).map_err(|e| in_file(&f.path, e))
    };

    let mut report = format!("mode={}\n", args.mode);
    match args.mode.as_str() {
        "hypercube" => {
            let k = args.k.ok_or_else(|| needs("k"))?;
            let bound = hypercube_bound(k, args.subopt)?;
            let _ = writeln!(report, "k={k}");
            let _ = writeln!(report, "subopt={}", args.subopt);
            let _ = writeln!(report, "bound={bound}");
            let _ = writeln!(report, "vacuous=false");
        }
        "haochen" => {
            let model = load_model(find("model"))?;
            let graph = build_matrices(&model)?;
            let d = args.d.ok_or_else(|| needs("d"))?;
            let alpha = args.alpha.ok_or_else(|| needs("alpha"))?;
            let d_prime = args.d_prime.unwrap_or(d);
            let r = haochen_bound(&graph, alpha, d, d_prime, args.subopt, args.c1, args.c2)?;
            report.push_str(&r.to_kv_string());
        }
        "fnclass" => {
            let model = load_model(find("model"))?;
            let features = find("features");
            let phi = FeatureMatrix::new(
                parse_matrix(&features.text).map_err(|e| in_file(&features.path, e))?,
            )?;
            let labels = find("labels");
            let ystar = LabelFunction::new(
                LabelDomain::Inputs,
                parse_labels(&labels.text).map_err(|e| in_file(&labels.path, e))?,
            )?;
            let d = args.d.ok_or_else(|| needs("d"))?;
            let strategy = if let Some(path) = &args.g_labels {
                let g_file = find("g_labels");
                let g = LabelFunction::new(
                    LabelDomain::Augmentations,
                    parse_labels(&g_file.text).map_err(|e| in_file(path, e))?,
                )?;
                GStrategy::UserSupplied(g)
            } else if args.g == "exact" {
                GStrategy::ExactEnumeration
            } else {
                GStrategy::PropagateLabels
            };
            let r = fnclass_bound(&model, &phi, &ystar, args.subopt, d, args.d_prime, strategy)?;
            report.push_str(&r.to_kv_string());
        }
        _ => unreachable!("clap restricts the mode"),
    }
    write_output(&args.out, "report.txt", &report)
}

// ============================================================================
// hypercube
// ============================================================================

fn cmd_hypercube(args: &HypercubeArgs) -> Result<()> {
    let mut cfg = if args.preset == "bench" {
        ExperimentConfig::bench()
    } else {
        ExperimentConfig::quick()
    };
    let config_file = match &args.config {
        Some(path) => Some(InputFile::read("config", path)?),
        None => None,
    };
    if let Some(f) = &config_file {
        let entries = parse_config(&f.text).map_err(|e| in_file(&f.path, e))?;
        apply_experiment_config(&mut cfg, &entries).map_err(|e| in_file(&f.path, e))?;
    }
    if let Some(spec) = &args.seeds {
        cfg.seeds = parse_seed_list(spec)?;
    }
    cfg.validate()?;

    let seeds = cfg
        .seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let inputs: Vec<InputFile> = config_file.into_iter().collect();
    RunManifest {
        command: "hypercube",
        config: args.config.as_deref(),
        seed: Some(seeds),
        out: &args.out,
        inputs: &inputs,
    }
    .write()?;

    let results = run_experiment(&cfg)?;
    write_output(&args.out, "summary.csv", &results.to_summary_csv())?;
    write_output(&args.out, "aggregate.csv", &results.aggregate_csv())?;
    for (arm, seed, trajectory) in &results.trajectories {
        let name = format!("trajectory_{}_{seed}.csv", arm.name());
        write_output(&args.out, &name, &trajectory.to_csv_deterministic())?;
    }
    Ok(())
}

// ============================================================================
// spurious
// ============================================================================

fn cmd_spurious(args: &SpuriousArgs) -> Result<()> {
    let inputs = [
        InputFile::read("model", &args.model)?,
        InputFile::read("rep", &args.rep)?,
        InputFile::read("labels", &args.labels)?,
    ];
    RunManifest {
        command: "spurious",
        config: None,
        seed: Some(args.seed.to_string()),
        out: &args.out,
        inputs: &inputs,
    }
    .write()?;

    let model = AugmentationModel::from_format_string(&inputs[0].text)
        .map_err(|e| in_file(&args.model, e))?;
    let rep = RepMatrix::new(parse_matrix(&inputs[1].text).map_err(|e| in_file(&args.rep, e))?)?;
    let ystar = LabelFunction::new(
        LabelDomain::Inputs,
        parse_labels(&inputs[2].text).map_err(|e| in_file(&args.labels, e))?,
    )?;

    let collapsed = collapse_to_means(&model, &rep)?;
    let mut rng = stream_rng(args.seed, SPURIOUS_SEARCH_STREAM);
    let outcome = search_bad_permutation(&model, &collapsed, &ystar, args.budget, &mut rng)?;

    // The permuted representation attains the same loss by construction;
    // report the measured difference rather than asserting it.
    let graph = build_matrices(&model)?;
    let permuted = permute_embeddings(&model, &collapsed, &outcome.perm)?;
    let delta_loss =
        spectral_loss_exact(&graph, &permuted)? - spectral_loss_exact(&graph, &collapsed)?;
    let identity_error = clf_loss(&model, &collapsed, &ystar, ProbeSpec::LeastSquares)?;

    write_output(&args.out, "permutation.txt", &format!("{}\n", perm_to_line(&outcome.perm)))?;
    let mut report = String::new();
    let _ = writeln!(report, "probe_error={}", outcome.probe_error);
    let _ = writeln!(report, "identity_probe_error={identity_error}");
    let _ = writeln!(report, "evaluations={}", outcome.evaluations);
    let _ = writeln!(report, "delta_loss={delta_loss}");
    let _ = writeln!(report, "unbalanced={}", outcome.unbalanced_warning);
    let _ = writeln!(
        report,
        "majority_baseline={}",
        outcome
            .majority_baseline
            .map_or("-".into(), |v| v.to_string())
    );
    write_output(&args.out, "report.txt", &report)
}

// ============================================================================
// text
// ============================================================================

fn cmd_text(args: &TextArgs) -> Result<()> {
    if args.corpus.is_some() == args.synthetic {
        return Err(Error::InvalidArgument(
            "give exactly one of --corpus FILE or --synthetic".into(),
        ));
    }
    let corpus_file = match &args.corpus {
        Some(path) => Some(InputFile::read("corpus", path)?),
        None => None,
    };
    let inputs: Vec<InputFile> = corpus_file.into_iter().collect();
    RunManifest {
        command: "text",
        config: None,
        seed: Some(args.seed.to_string()),
        out: &args.out,
        inputs: &inputs,
    }
    .write()?;

    let corpus = match inputs.first() {
        Some(f) => Corpus::parse(&f.text).map_err(|e| in_file(&f.path, e))?,
        None => synthetic_corpus(
            args.classes,
            args.docs_per_class,
            args.vocab,
            args.doc_len,
            args.seed,
        )?,
    };
    let aug = AugKind::from_name(&args.aug)?;
    let tc = TrainConfig {
        optimizer: parse_optimizer(&args.optimizer),
        lr: args.lr,
        weight_decay: args.weight_decay,
        beta1: 0.9,
        beta2: 0.99,
        batch_size: args.batch_size,
        epochs: args.epochs,
        // Loss, clipping, and patience are fixed by the text pipeline.
        grad_clip_norm: None,
        loss: LossSpec::Simclr { temperature: 1.0, normalize: true },
        seed: args.seed,
        label_orthogonal: false,
        memory_bank_size: 0,
        patience: None,
    };
    let trajectory = run_text_experiment(&corpus, aug, args.p_drop, args.rep_dim, &tc)?;
    write_output(&args.out, "trajectory.csv", &trajectory.to_csv_deterministic())
}

// ============================================================================
// train
// ============================================================================

/// The canonical featurization of augmentation x: its coordinate row when the
/// model carries points, a one-hot indicator otherwise. Matches what the
/// pair source feeds the network.
fn aug_feature(model: &AugmentationModel, x: usize) -> Input {
    match model.aug_points() {
        Some(points) => Input::Dense(points.row(x).iter().cloned().collect()),
        None => {
            let mut v = vec![0.0; model.n_augs()];
            v[x] = 1.0;
            Input::Dense(v)
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let inputs = [
        InputFile::read("model", &args.model)?,
        InputFile::read("labels", &args.labels)?,
    ];
    RunManifest {
        command: "train",
        config: None,
        seed: Some(args.seed.to_string()),
        out: &args.out,
        inputs: &inputs,
    }
    .write()?;

    let model = AugmentationModel::from_format_string(&inputs[0].text)
        .map_err(|e| in_file(&args.model, e))?;
    let ystar = LabelFunction::new(
        LabelDomain::Inputs,
        parse_labels(&inputs[1].text).map_err(|e| in_file(&args.labels, e))?,
    )?;
    if ystar.values().len() != model.n_inputs() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} inputs",
            ystar.values().len(),
            model.n_inputs()
        )));
    }

    let loss = if args.loss == "simclr" {
        LossSpec::Simclr { temperature: args.temperature, normalize: true }
    } else {
        LossSpec::SpectralSampled
    };
    let tc = TrainConfig {
        optimizer: parse_optimizer(&args.optimizer),
        lr: args.lr,
        weight_decay: args.weight_decay,
        beta1: 0.9,
        beta2: 0.99,
        batch_size: args.batch_size,
        epochs: args.epochs,
        grad_clip_norm: args.grad_clip,
        loss,
        seed: args.seed,
        label_orthogonal: false,
        memory_bank_size: 0,
        patience: None,
    };

    let source = ModelPairSource::new(&model, Some(&ystar), args.epoch_pairs);
    let mut vrng = stream_rng(args.seed, TRAIN_VAL_STREAM);
    let (val_pairs, _) = source.draw_batch(args.n_val.max(2), &mut vrng);
    // Probe on every augmentation, labeled by its most likely input.
    let g = posterior_mode_labels(&model, &ystar)?;
    let probe_inputs: Vec<Input> = (0..model.n_augs()).map(|x| aug_feature(&model, x)).collect();
    let eval = Evaluator {
        val_pairs,
        val_labels: None,
        probe_inputs,
        probe_labels: g.values().to_vec(),
        probe_classes: 2,
        loss: tc.loss,
    };

    let in_dim = model.aug_points().map_or(model.n_augs(), |p| p.ncols());
    let mut rep = if args.rep == "mlp2" {
        TrainableRep::new_mlp2(in_dim, args.hidden, args.rep_dim, args.seed)
    } else {
        TrainableRep::new_linear(in_dim, args.rep_dim, args.seed)
    };
    let trajectory = train_contrastive(&source, &mut rep, &tc, &eval)?;
    write_output(&args.out, "trajectory.csv", &trajectory.to_csv_deterministic())?;

    // Final embeddings of every augmentation, in the matrix file format the
    // bound and spurious commands read back.
    let mut emb = String::new();
    for x in 0..model.n_augs() {
        let z = contrastlab::trainers::forward(&rep, &aug_feature(&model, x))?;
        let row: Vec<String> = z.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(emb, "{}", row.join(" "));
    }
    write_output(&args.out, "embeddings.txt", &emb)
}

// ============================================================================
// Tests
// ============================================================================
