//! Source training, statistics export, source-free adaptation, inference,
//! baselines and evaluation.

mod adapt;
mod eval;
mod experiment;
mod train;

pub use adapt::{
    adapt_target, adapt_target_traced, baseline_direct_fit, baseline_entropy_min, AdaptConfig, AdaptOutcome,
    AdaptTrace, Objective,
};
pub use eval::{
    accuracy, alignment, evaluate, infer, mae, predict_classes, site_metric, EvalReport, ExperimentReport, SiteResult,
};
pub use experiment::{
    default_sites, generate_sites, run_experiment, DataSection, ExperimentSection, Manifest, SiteEntry, TaskName,
};
pub use train::{export_features, export_stats, train_source, TrainConfig};

use std::fmt;

use ndarray::Array2;
use thiserror::Error;

use crate::datasim::DataError;
use crate::divergence::DivergenceError;
use crate::gmm::GmmError;
use crate::nn::NnError;
use crate::statstore::StoreError;

/// Unlabelled target inputs: the only target data adaptation sees.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetData {
    pub train: Array2<f64>,
    /// Held out for the unsupervised validation loss.
    pub val: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Generate,
    Train,
    Export,
    Privacy,
    Adapt,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Export => "export",
            Stage::Privacy => "privacy",
            Stage::Adapt => "adapt",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("component count mismatch: bundle has K={bundle}, config asks for K={config}")]
    ComponentCountMismatch { bundle: usize, config: usize },
    #[error("unsupported task: {0}")]
    UnsupportedTask(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("[{stage}] {source}")]
    Staged {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// Tags the error with the stage it came from; an existing tag is kept.
    pub fn at(self, stage: Stage) -> Self {
        match self {
            PipelineError::Staged { .. } => self,
            other => PipelineError::Staged { stage, source: Box::new(other) },
        }
    }

    /// The innermost, untagged error.
    pub fn root(&self) -> &PipelineError {
        match self {
            PipelineError::Staged { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T, E: Into<PipelineError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.into().at(stage))
    }
}
