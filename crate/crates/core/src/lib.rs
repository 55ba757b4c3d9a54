//! Neighborhood uncertainty classification for frozen classifiers.
//!
//! Given representation vectors from an already-trained classifier, this
//! crate estimates how likely each prediction is to be wrong by looking
//! at the point's k-nearest-neighbor neighborhood in representation
//! space. It provides:
//!
//! * [`repr_store`] — the on-disk representation-set format and loader;
//! * [`knn`] — exact, deterministic kNN search;
//! * [`stats`] — neighborhood statistics (mean neighbor distance,
//!   same-class mean distance, label agreement) and k-sweeps;
//! * [`model`] — the trainable permutation-invariant uncertainty scorer;
//! * [`baselines`] — softmax confidence, temperature-calibrated softmax,
//!   direct statistic scores, and Mahalanobis-to-centroid;
//! * [`metrics`] — AUROC / AUPR-In / AUPR-Out with explicit tie handling;
//! * [`synth`] — a planted synthetic benchmark generator.

pub mod baselines;
pub mod error;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod repr_store;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
