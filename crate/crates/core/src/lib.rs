//! Open-set decisions for 1-to-many face search.
//!
//! A 1-to-many search always returns a rank-one identity. Whether that identity
//! is actually the person in the probe can be read off the ranks at which the
//! identity's *other* enrolled images appear: genuine matches drag their sibling
//! images to the top of the list, coincidental matches do not. This crate builds
//! that feature vector from exact cosine search, trains a small layer-normalized
//! MLP on it, and evaluates it against score-threshold, centroid and fusion
//! baselines.
//!
//! Module map:
//!
//! - [`store`]: embedding records, on-disk formats, normalization.
//! - [`search`]: exact brute-force ranking and rank-vector extraction.
//! - [`protocol`]: dual-search curation, stratified split, permutation augmentation.
//! - [`mlp`] and [`train`]: the classifier, backprop, Adam and k-fold training.
//! - [`baselines`]: max-score thresholding, mean/median centroids, naive fusion.
//! - [`synth`]: synthetic identity clusters and probe degradation.
//! - [`experiment`]: per-cell experiment harness and report rendering.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precisions used by the pipeline.

pub mod baselines;
pub mod experiment;
mod framing;
pub mod mlp;
pub mod protocol;
pub mod rng;
pub mod scalar;
pub mod search;
pub mod store;
pub mod synth;
pub mod train;

pub use scalar::Scalar;

/// Training-precision classifier.
pub type Mlp = mlp::MlpModel<f64>;
/// Storage-precision classifier, as read back from a model file.
pub type Mlp32 = mlp::MlpModel<f32>;
/// Gradients of a training-precision classifier.
pub type MlpGrads = mlp::MlpParams<f64>;
