//! contrastlab: a numerical laboratory for contrastive self-supervised learning
//! on finite augmentation graphs.
//!
//! The library works with fully explicit, finite probability models of the
//! augmentation process. From a model it builds the normalized adjacency /
//! Laplacian machinery, evaluates contrastive losses (spectral and SimCLR)
//! exactly or by sampling, solves for loss minimizers inside linear feature
//! classes, evaluates transfer bounds on downstream linear-probe error, and
//! constructs adversarial "spurious" minimizers via permutation search.
//! Gradient-based trainers (linear / two-layer MLP / bag-of-words embedding)
//! mirror the same objectives at experiment scale, and the `hypercube` and
//! `textlab` modules package end-to-end synthetic experiments.
//!
//! Everything is deterministic given explicit seeds; sampling always takes a
//! caller-owned generator.

pub mod augmodel;
pub mod bounds;
pub mod error;
pub mod hypercube;
pub(crate) mod linalg;
pub mod losses;
pub mod rng;
pub mod solver;
pub mod spectral;
pub mod spurious;
pub mod textlab;
pub mod trainers;

pub use augmodel::{AugmentationModel, HypercubeConfig};
pub use error::{Error, Result};
pub use losses::{LabelDomain, LabelFunction, RepMatrix};
pub use solver::{FeatureMatrix, SpectralSolution};
pub use spectral::SpectralGraph;
