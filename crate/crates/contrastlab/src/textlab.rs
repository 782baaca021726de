//! Token-sequence augmentations and the bag-of-words contrastive pipeline.
//!
//! Documents are lists of token indices with a class label. Four
//! augmentations are provided: token dropping with a fixed survivor count,
//! dropping followed by a shuffle, a uniform choice of document half, and a
//! uniform choice among the full document and either half. Training reuses
//! the generic contrastive loop with a bag-of-words representation, whose
//! embedding of a document is the average of its token embeddings and is
//! therefore invariant to token order.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::trainers::{
    train_contrastive, Evaluator, Input, LossSpec, PairSource, TrainConfig, TrainableRep,
    Trajectory,
};

/// Documents longer than this are trimmed when a corpus is parsed.
pub const MAX_DOC_TOKENS: usize = 60;

const GEN_STREAM: u64 = 11;
const TEXT_VAL_STREAM: u64 = 12;

// ============================================================================
// Corpus
// ============================================================================

/// A tokenized labeled corpus: token indices are below `vocab_size`, labels
/// below `n_classes`, and every document is nonempty.
#[derive(Debug, Clone)]
pub struct Corpus {
    vocab_size: usize,
    docs: Vec<(Vec<usize>, usize)>,
    n_classes: usize,
}

impl Corpus {
    pub fn new(
        vocab_size: usize,
        docs: Vec<(Vec<usize>, usize)>,
        n_classes: usize,
    ) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::InvalidArgument("corpus has no documents".into()));
        }
        for (i, (tokens, label)) in docs.iter().enumerate() {
            if tokens.is_empty() {
                return Err(Error::InvalidArgument(format!("document {i} is empty")));
            }
            if let Some(&t) = tokens.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::InvalidArgument(format!(
                    "document {i} has token {t} outside vocabulary of {vocab_size}"
                )));
            }
            if *label >= n_classes {
                return Err(Error::InvalidArgument(format!(
                    "document {i} has label {label} outside {n_classes} classes"
                )));
            }
        }
        Ok(Corpus {
            vocab_size,
            docs,
            n_classes,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[(Vec<usize>, usize)] {
        &self.docs
    }

    /// Parse one document per line in the form
    /// `label<TAB>space-separated token indices`. Blank lines are skipped,
    /// documents are trimmed to [`MAX_DOC_TOKENS`], and the vocabulary and
    /// class count are the smallest ones covering the indices seen.
    pub fn parse(text: &str) -> Result<Corpus> {
        let mut docs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (label_s, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: lineno,
                detail: "expected `label<TAB>tokens`".into(),
            })?;
            let label: usize = label_s.trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                detail: format!("label `{}` is not a nonnegative integer", label_s.trim()),
            })?;
            let mut tokens = Vec::new();
            for tok in rest.split_whitespace() {
                tokens.push(tok.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    detail: format!("token `{tok}` is not a nonnegative integer"),
                })?);
            }
            if tokens.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    detail: "document has no tokens".into(),
                });
            }
            tokens.truncate(MAX_DOC_TOKENS);
            docs.push((tokens, label));
        }
        let vocab = docs
            .iter()
            .flat_map(|(t, _)| t.iter())
            .max()
            .map_or(0, |&m| m + 1);
        let classes = docs.iter().map(|&(_, c)| c).max().map_or(0, |m| m + 1);
        Corpus::new(vocab, docs, classes)
    }

    /// Inverse of [`Corpus::parse`] up to trimming and blank lines.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (tokens, label) in &self.docs {
            out.push_str(&label.to_string());
            out.push('\t');
            for (i, t) in tokens.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&t.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Corpus of `classes` classes over disjoint contiguous vocabulary blocks:
/// class c draws its tokens uniformly from block c, so the class is
/// recoverable from any single surviving token.
pub fn synthetic_corpus(
    classes: usize,
    docs_per_class: usize,
    vocab: usize,
    doc_len: usize,
    seed: u64,
) -> Result<Corpus> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if docs_per_class == 0 || doc_len == 0 {
        return Err(Error::InvalidArgument(
            "docs_per_class and doc_len must be positive".into(),
        ));
    }
    if vocab < classes {
        return Err(Error::InvalidArgument(format!(
            "vocabulary of {vocab} cannot cover {classes} disjoint classes"
        )));
    }
    let mut rng = stream_rng(seed, GEN_STREAM);
    let mut docs = Vec::with_capacity(classes * docs_per_class);
    for c in 0..classes {
        let lo = c * vocab / classes;
        let hi = (c + 1) * vocab / classes;
        for _ in 0..docs_per_class {
            let tokens = (0..doc_len).map(|_| rng.random_range(lo..hi)).collect();
            docs.push((tokens, c));
        }
    }
    Corpus::new(vocab, docs, classes)
}

// ============================================================================
// Augmentations
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugKind {
    Drop,
    DropPermute,
    Split,
    SplitFull,
}

impl AugKind {
    pub fn name(self) -> &'static str {
        match self {
            AugKind::Drop => "drop",
            AugKind::DropPermute => "drop-permute",
            AugKind::Split => "split",
            AugKind::SplitFull => "split-full",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "drop" => Ok(AugKind::Drop),
            "drop-permute" => Ok(AugKind::DropPermute),
            "split" => Ok(AugKind::Split),
            "split-full" => Ok(AugKind::SplitFull),
            other => Err(Error::InvalidArgument(format!(
                "unknown augmentation `{other}` (drop, drop-permute, split, split-full)"
            ))),
        }
    }
}

/// Number of tokens that survive dropping: ceil((1 - p) * len), with values
/// within 1e-9 of an integer snapped to it so binary floats like p = 0.3 on
/// a length-10 document give exactly 7 rather than tipping the ceiling.
fn survivor_count(len: usize, p_drop: f64) -> usize {
    let t = (1.0 - p_drop) * len as f64;
    let snapped = if (t - t.round()).abs() < 1e-9 { t.round() } else { t.ceil() };
    (snapped as usize).clamp(1, len)
}

fn drop_tokens(doc: &[usize], p_drop: f64, permute: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let keep = survivor_count(doc.len(), p_drop);
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, doc.len(), keep).into_vec();
    picked.sort_unstable();
    let mut out: Vec<usize> = picked.into_iter().map(|i| doc[i]).collect();
    if permute {
        out.shuffle(rng);
    }
    out
}

// Halves share the middle token when the length is odd so both are nonempty
// even for a single-token document.
fn left_half(doc: &[usize]) -> Vec<usize> {
    doc[..doc.len().div_ceil(2)].to_vec()
}

fn right_half(doc: &[usize]) -> Vec<usize> {
    doc[doc.len() / 2..].to_vec()
}

/// Draw one augmented view of `doc`. Dropping keeps a uniform subset of
/// exactly `survivor_count` tokens in document order; the permuting variant
/// shuffles the survivors; the split variants pick among document halves.
pub fn augment(
    doc: &[usize],
    kind: AugKind,
    p_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if doc.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot augment an empty document".into(),
        ));
    }
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::InvalidArgument(format!(
            "p_drop must be in [0, 1), got {p_drop}"
        )));
    }
    Ok(match kind {
        AugKind::Drop => drop_tokens(doc, p_drop, false, rng),
        AugKind::DropPermute => drop_tokens(doc, p_drop, true, rng),
        AugKind::Split => {
            if rng.random::<bool>() {
                left_half(doc)
            } else {
                right_half(doc)
            }
        }
        AugKind::SplitFull => match rng.random_range(0..3u8) {
            0 => doc.to_vec(),
            1 => left_half(doc),
            _ => right_half(doc),
        },
    })
}

// ============================================================================
// Training pipeline
// ============================================================================

/// Pair source that draws a uniform document and augments it twice
/// independently; one epoch is one pass worth of documents.
pub struct TextPairSource<'a> {
    corpus: &'a Corpus,
    aug: AugKind,
    p_drop: f64,
}

impl<'a> TextPairSource<'a> {
    pub fn new(corpus: &'a Corpus, aug: AugKind, p_drop: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p_drop) {
            return Err(Error::InvalidArgument(format!(
                "p_drop must be in [0, 1), got {p_drop}"
            )));
        }
        Ok(TextPairSource {
            corpus,
            aug,
            p_drop,
        })
    }
}

impl PairSource for TextPairSource<'_> {
    fn epoch_len(&self) -> usize {
        self.corpus.n_docs()
    }

    fn draw_batch(&self, n_pairs: usize, rng: &mut ChaCha8Rng) -> (Vec<(Input, Input)>, Vec<f64>) {
        let docs = self.corpus.docs();
        let mut pairs = Vec::with_capacity(n_pairs);
        let mut labels = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let (doc, label) = &docs[rng.random_range(0..docs.len())];
            // Inputs were validated when the corpus and source were built.
            let a = augment(doc, self.aug, self.p_drop, rng).expect("validated doc");
            let b = augment(doc, self.aug, self.p_drop, rng).expect("validated doc");
            pairs.push((Input::Tokens(a), Input::Tokens(b)));
            labels.push(*label as f64);
        }
        (pairs, labels)
    }
}

/// Train a bag-of-words representation on the corpus with batch InfoNCE at
/// temperature 1 over cosine similarities, gradient clipping at 2.5, and
/// early stopping with patience 10; those three are fixed parts of the
/// pipeline, while the optimizer, learning rate, batch size, epoch budget,
/// and seed come from `cfg`. Validation scores one fresh augmentation pair
/// per document drawn once up front; the probe fits on the clean full
/// documents against their class labels.
pub fn run_text_experiment(
    corpus: &Corpus,
    aug: AugKind,
    p_drop: f64,
    rep_dim: usize,
    cfg: &TrainConfig,
) -> Result<Trajectory> {
    if rep_dim == 0 {
        return Err(Error::InvalidArgument(
            "representation needs at least one dimension".into(),
        ));
    }
    let source = TextPairSource::new(corpus, aug, p_drop)?;
    let mut tc = cfg.clone();
    tc.loss = LossSpec::Simclr {
        temperature: 1.0,
        normalize: true,
    };
    tc.grad_clip_norm = Some(2.5);
    tc.patience = Some(10);
    tc.validate()?;
    let mut vrng = stream_rng(cfg.seed, TEXT_VAL_STREAM);
    let (val_pairs, _) = source.draw_batch(corpus.n_docs().max(2), &mut vrng);
    let probe_inputs: Vec<Input> = corpus
        .docs()
        .iter()
        .map(|(t, _)| Input::Tokens(t.clone()))
        .collect();
    // Two-class corpora use the signed probe protocol; larger ones the
    // one-vs-rest argmax protocol.
    let probe_labels: Vec<f64> = if corpus.n_classes() == 2 {
        corpus
            .docs()
            .iter()
            .map(|&(_, c)| if c == 0 { -1.0 } else { 1.0 })
            .collect()
    } else {
        corpus.docs().iter().map(|&(_, c)| c as f64).collect()
    };
    let eval = Evaluator {
        val_pairs,
        val_labels: None,
        probe_inputs,
        probe_labels,
        probe_classes: corpus.n_classes(),
        loss: tc.loss,
    };
    let mut rep = TrainableRep::new_bow(corpus.vocab_size(), rep_dim, cfg.seed);
    train_contrastive(&source, &mut rep, &tc, &eval)
}

// ============================================================================
// Tests
// ============================================================================
