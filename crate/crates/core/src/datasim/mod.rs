//! Synthetic multi-site benchmark: procedurally rendered grayscale images,
//! per-site acquisition shifts, class removal, and a regression variant.

mod render;
mod sfds;
mod shift;

pub use render::{generate_base, make_regression, GenConfig};
pub use sfds::{read_sfds, write_sfds, SFDS_MAGIC, SFDS_VERSION};
pub use shift::{apply_shift, gaussian_blur, ShiftKind, ShiftSpec};

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use thiserror::Error;

use crate::nn::{Labels, TaskKind, TaskSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset already carries a {0:?} shift")]
    AlreadyShifted(ShiftKind),
    #[error("removing these classes would leave no training data")]
    WouldEmptyDataset,
    #[error("class {0} is not in the label alphabet")]
    UnknownClass(usize),
    #[error("invalid shift: {0}")]
    InvalidShift(String),
    #[error("operation needs a classification dataset")]
    NotClassification,
    #[error("bad dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Inputs and labels of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// One flattened image per row, values in [0, 1].
    pub inputs: Array2<f64>,
    pub labels: Labels,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn keep(&self, rows: &[usize]) -> Split {
        Split { inputs: self.inputs.select(Axis(0), rows), labels: self.labels.select(rows) }
    }
}

/// One site's data. `width` is the image side length.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub width: usize,
    pub task: TaskSpec,
    pub shift: ShiftSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl SiteDataset {
    pub fn input_dim(&self) -> usize {
        self.width * self.width
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.task.kind {
            TaskKind::Classification { n_classes } => Some(n_classes),
            TaskKind::Regression => None,
        }
    }

    pub fn splits(&self) -> [&Split; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub(crate) fn splits_mut(&mut self) -> [&mut Split; 3] {
        [&mut self.train, &mut self.val, &mut self.test]
    }

    /// Training and validation inputs with labels dropped.
    pub fn unlabelled(&self) -> crate::pipeline::TargetData {
        crate::pipeline::TargetData { train: self.train.inputs.clone(), val: self.val.inputs.clone() }
    }
}

/// Drops every train and validation sample whose class is in `classes`.
/// The test split is left intact.
pub fn remove_classes(ds: &SiteDataset, classes: &BTreeSet<usize>) -> Result<SiteDataset> {
    let n_classes = ds.n_classes().ok_or(DataError::NotClassification)?;
    if let Some(&c) = classes.iter().find(|&&c| c >= n_classes) {
        return Err(DataError::UnknownClass(c));
    }
    let filter = |split: &Split| -> Split {
        let Labels::Classes(labels) = &split.labels else { unreachable!("classification dataset has class labels") };
        let rows: Vec<usize> = (0..labels.len()).filter(|&r| !classes.contains(&labels[r])).collect();
        split.keep(&rows)
    };
    let train = filter(&ds.train);
    if classes.len() >= n_classes || train.is_empty() {
        return Err(DataError::WouldEmptyDataset);
    }
    Ok(SiteDataset { train, val: filter(&ds.val), ..ds.clone() })
}
