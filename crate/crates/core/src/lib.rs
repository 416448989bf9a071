//! Source-free adaptation of a split network by aligning per-feature
//! Gaussian-mixture statistics of its embedding to those of the source site.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasim;
pub mod divergence;
pub mod gmm;
pub mod nn;
pub mod pipeline;
pub mod statstore;

/// Feature embeddings, one row per sample and one column per feature.
pub type FeatureBatch = ndarray::Array2<f64>;

pub use datasim::{ShiftKind, ShiftSpec, SiteDataset};
pub use divergence::{DivergenceReport, Variant};
pub use gmm::{EmConfig, Gmm1D, GmmParams, WarmStartStore};
pub use nn::{Architecture, SplitModel, TaskSpec};
pub use pipeline::{AdaptConfig, EvalReport, Manifest, PipelineError, TargetData, TrainConfig};
pub use statstore::{DpConfig, StatsBundle, StoreError};
