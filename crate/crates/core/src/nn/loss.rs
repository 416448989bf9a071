use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { n_classes: usize },
    Regression,
}

/// Task and its supervised loss: cross-entropy for classification, mean
/// squared error for regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn classification(n_classes: usize) -> Self {
        Self { kind: TaskKind::Classification { n_classes } }
    }

    pub fn regression() -> Self {
        Self { kind: TaskKind::Regression }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Classification { n_classes } => n_classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.kind, TaskKind::Classification { .. })
    }
}

/// Supervision targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(idx.iter().map(|&i| c[i]).collect()),
            Labels::Values(v) => Labels::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            Labels::Classes(c) => c.iter().map(|&v| v as f64).collect(),
            Labels::Values(v) => v.clone(),
        }
    }
}

fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Batch-mean task loss and its gradient with respect to the outputs.
pub fn task_loss_and_grad(outputs: ArrayView2<f64>, labels: &Labels, spec: &TaskSpec) -> Result<(f64, Array2<f64>)> {
    let batch = outputs.nrows();
    if labels.len() != batch {
        return Err(NnError::ShapeMismatch(format!("{} labels for {batch} outputs", labels.len())));
    }
    if outputs.ncols() != spec.output_dim() {
        return Err(NnError::ShapeMismatch(format!(
            "{} output columns, task needs {}",
            outputs.ncols(),
            spec.output_dim()
        )));
    }
    let scale = 1.0 / batch as f64;
    match (&spec.kind, labels) {
        (TaskKind::Classification { n_classes }, Labels::Classes(classes)) => {
            if let Some(&label) = classes.iter().find(|&&c| c >= *n_classes) {
                return Err(NnError::LabelOutOfRange { label, n_classes: *n_classes });
            }
            let logp = log_softmax_rows(outputs);
            let loss = -classes.iter().enumerate().map(|(r, &c)| logp[[r, c]]).sum::<f64>() * scale;
            let mut grad = logp.mapv(f64::exp);
            for (r, &c) in classes.iter().enumerate() {
                grad[[r, c]] -= 1.0;
            }
            grad *= scale;
            Ok((loss, grad))
        }
        (TaskKind::Regression, Labels::Values(values)) => {
            let target = Array1::from(values.clone());
            let diff = &outputs.column(0) - &target;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
            let grad = (diff * (2.0 * scale)).insert_axis(Axis(1));
            Ok((loss, grad))
        }
        _ => Err(NnError::ShapeMismatch("label type does not match task".into())),
    }
}

/// Batch-mean Shannon entropy of the softmax outputs and its gradient with
/// respect to the logits.
pub fn entropy_loss_and_grad(logits: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let batch = logits.nrows() as f64;
    let logp = log_softmax_rows(logits);
    let p = logp.mapv(f64::exp);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (r, (prow, lrow)) in p.axis_iter(Axis(0)).zip(logp.axis_iter(Axis(0))).enumerate() {
        let h: f64 = -prow.iter().zip(lrow.iter()).map(|(p, l)| p * l).sum::<f64>();
        total += h;
        for c in 0..prow.len() {
            grad[[r, c]] = -prow[c] * (lrow[c] + h) / batch;
        }
    }
    (total / batch, grad)
}
