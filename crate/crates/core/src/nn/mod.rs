//! A small dense network split into a feature extractor and a label
//! predictor, with hand-written backpropagation.
//!
//! The feature tap is the pre-activation output of the last extractor
//! layer. That layer's activation is applied on the way into the predictor.

mod loss;
mod optim;

pub use loss::{entropy_loss_and_grad, task_loss_and_grad, Labels, TaskKind, TaskSpec};
pub use optim::{AdamW, AdamWConfig};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} outside [0, {n_classes})")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("forward cache belongs to model revision {cache}, model is at {model}")]
    StaleCache { cache: u64, model: u64 },
    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Linear => z.clone(),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
        }
    }

    /// Multiplies `grad` in place by the derivative evaluated at `z`.
    fn backprop(self, z: &Array2<f64>, grad: &mut Array2<f64>) {
        if self == Activation::Relu {
            grad.zip_mut_with(z, |g, &v| {
                if v <= 0.0 {
                    *g = 0.0
                }
            });
        }
    }
}

/// Fully connected layer computing `act(x W + b)`; `weight` is in x out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self { weight: Array2::zeros((input, output)), bias: Array1::zeros(output), activation }
    }

    /// He-normal weights, zero bias.
    pub fn he(input: usize, output: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("positive std");
        Self {
            weight: Array2::from_shape_fn((input, output), |_| normal.sample(rng)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn pre_activation(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Layer sizes for the default MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden widths before the feature layer.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub output_dim: usize,
}

impl Architecture {
    pub fn mlp(input_dim: usize, output_dim: usize) -> Self {
        Self { input_dim, hidden: vec![64], feature_dim: 32, output_dim }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Repr,
    Pred,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Repr => 0,
            Partition::Pred => 1,
        }
    }
}

/// Feature extractor plus label predictor.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub repr: Vec<Dense>,
    pub pred: Vec<Dense>,
    predictor_frozen: bool,
    revision: u64,
}

impl PartialEq for SplitModel {
    fn eq(&self, other: &Self) -> bool {
        self.repr == other.repr && self.pred == other.pred
    }
}

impl SplitModel {
    pub fn new(repr: Vec<Dense>, pred: Vec<Dense>) -> Result<Self> {
        let model = Self { repr, pred, predictor_frozen: false, revision: 0 };
        model.check_chain()?;
        Ok(model)
    }

    /// Randomly initialised ReLU MLP for `arch`.
    pub fn mlp(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut repr = Vec::new();
        let mut width = arch.input_dim;
        for &h in arch.hidden.iter().chain(std::iter::once(&arch.feature_dim)) {
            repr.push(Dense::he(width, h, Activation::Relu, &mut rng));
            width = h;
        }
        let pred = vec![Dense::he(width, arch.output_dim, Activation::Linear, &mut rng)];
        Self::new(repr, pred).expect("layer widths chain by construction")
    }

    fn check_chain(&self) -> Result<()> {
        if self.repr.is_empty() || self.pred.is_empty() {
            return Err(NnError::ShapeMismatch("both partitions need at least one layer".into()));
        }
        let layers: Vec<&Dense> = self.layers().map(|(_, l)| l).collect();
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(NnError::ShapeMismatch("bias length differs from layer width".into()));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(NnError::ShapeMismatch(format!(
                    "layer of width {} feeds a layer expecting {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(())
    }

    /// All layers in forward order with their partition.
    pub fn layers(&self) -> impl Iterator<Item = (Partition, &Dense)> {
        self.repr.iter().map(|l| (Partition::Repr, l)).chain(self.pred.iter().map(|l| (Partition::Pred, l)))
    }

    pub fn input_dim(&self) -> usize {
        self.repr[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.repr.last().expect("non-empty").output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.pred.last().expect("non-empty").output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers().map(|(_, l)| l.n_params()).sum()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub(crate) fn bump_revision(&mut self) {
        self.revision += 1;
    }

    /// Marks the predictor as not trainable. Idempotent.
    pub fn freeze_predictor(&mut self) -> &mut Self {
        self.predictor_frozen = true;
        self
    }

    pub fn is_predictor_frozen(&self) -> bool {
        self.predictor_frozen
    }

    /// Copy of this model with its predictor frozen.
    pub fn frozen(mut self) -> Self {
        self.freeze_predictor();
        self
    }

    /// Extractor from `self`, predictor from `predictor`.
    pub fn with_predictor_of(&self, predictor: &SplitModel) -> Result<Self> {
        let mut out = self.clone();
        out.pred = predictor.pred.clone();
        out.check_chain()?;
        Ok(out)
    }

    /// Pre-activation features only.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        let last = self.repr.len() - 1;
        for (idx, layer) in self.repr.iter().enumerate() {
            let z = layer.pre_activation(h.view());
            if idx == last {
                return Ok(z);
            }
            h = layer.activation.apply(&z);
        }
        unreachable!("repr is non-empty")
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping what backward needs.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.repr.len() + self.pred.len());
        let mut pre = Vec::with_capacity(inputs.capacity());
        let mut h = x.to_owned();
        for (_, layer) in self.layers() {
            let z = layer.pre_activation(h.view());
            let next = layer.activation.apply(&z);
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        let features = pre[self.repr.len() - 1].clone();
        Ok(ForwardPass { features, outputs: h, cache: ForwardCache { inputs, pre, revision: self.revision } })
    }

    /// Output of the whole network.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.outputs)
    }

    /// Parameter gradients given upstream gradients at the outputs and/or the
    /// feature tap. Without `grad_outputs` every predictor gradient is zero.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_outputs: Option<ArrayView2<f64>>,
        grad_features: Option<ArrayView2<f64>>,
    ) -> Result<Gradients> {
        if cache.revision != self.revision {
            return Err(NnError::StaleCache { cache: cache.revision, model: self.revision });
        }
        let batch = cache.inputs[0].nrows();
        let n_repr = self.repr.len();
        let mut grads = Gradients::zeros_like(self);

        let mut d_features = Array2::<f64>::zeros((batch, self.feature_dim()));
        if let Some(g) = grad_features {
            if g.dim() != d_features.dim() {
                return Err(NnError::ShapeMismatch(format!(
                    "feature gradient {:?}, features {:?}",
                    g.dim(),
                    d_features.dim()
                )));
            }
            d_features += &g;
        }

        if let Some(g) = grad_outputs {
            if g.dim() != (batch, self.output_dim()) {
                return Err(NnError::ShapeMismatch(format!(
                    "output gradient {:?}, outputs {:?}",
                    g.dim(),
                    (batch, self.output_dim())
                )));
            }
            let mut upstream = g.to_owned();
            for (p, layer) in self.pred.iter().enumerate().rev() {
                let idx = n_repr + p;
                layer.activation.backprop(&cache.pre[idx], &mut upstream);
                grads.pred[p].weight = cache.inputs[idx].t().dot(&upstream);
                grads.pred[p].bias = upstream.sum_axis(Axis(0));
                upstream = upstream.dot(&layer.weight.t());
            }
            // through the tap activation back onto the features
            self.repr[n_repr - 1].activation.backprop(&cache.pre[n_repr - 1], &mut upstream);
            d_features += &upstream;
        }

        let mut upstream = d_features;
        for (idx, layer) in self.repr.iter().enumerate().rev() {
            if idx != n_repr - 1 {
                layer.activation.backprop(&cache.pre[idx], &mut upstream);
            }
            grads.repr[idx].weight = cache.inputs[idx].t().dot(&upstream);
            grads.repr[idx].bias = upstream.sum_axis(Axis(0));
            if idx > 0 {
                upstream = upstream.dot(&layer.weight.t());
            }
        }
        Ok(grads)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    revision: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// B x feature_dim pre-activation features.
    pub features: Array2<f64>,
    pub outputs: Array2<f64>,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients mirroring the layout of a [`SplitModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub repr: Vec<DenseGrad>,
    pub pred: Vec<DenseGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &SplitModel) -> Self {
        let z =
            |l: &Dense| DenseGrad { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.raw_dim()) };
        Self { repr: model.repr.iter().map(z).collect(), pred: model.pred.iter().map(z).collect() }
    }

    pub fn all(&self) -> impl Iterator<Item = &DenseGrad> {
        self.repr.iter().chain(self.pred.iter())
    }
}
