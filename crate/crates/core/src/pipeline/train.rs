use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, Stage, StageExt};
use crate::datasim::SiteDataset;
use crate::gmm::{fit_feature_batch, EmConfig, WarmStartStore};
use crate::nn::{task_loss_and_grad, AdamW, AdamWConfig, Architecture, Labels, SplitModel, TaskSpec};
use crate::statstore::StatsBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// 1 trains on the train split and selects on val. More pools train and
    /// val, trains one model per fold and keeps the best held-out fold.
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            feature_dim: 32,
            epochs: 50,
            batch_size: 50,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            folds: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self, input_dim: usize, task: &TaskSpec) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            output_dim: task.output_dim(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.folds == 0 || self.feature_dim == 0 {
            return Err(PipelineError::InvalidConfig("batch_size, folds and feature_dim must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PipelineError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

fn mean_task_loss(model: &SplitModel, x: ArrayView2<f64>, labels: &Labels, task: &TaskSpec) -> Result<f64> {
    let out = model.predict(x)?;
    Ok(task_loss_and_grad(out.view(), labels, task)?.0)
}

/// Minibatch AdamW on the task loss, returning the epoch-end checkpoint
/// with the lowest validation loss, and that loss.
#[allow(clippy::too_many_arguments)]
fn fit_supervised(
    init: SplitModel,
    x: ArrayView2<f64>,
    labels: &Labels,
    val_x: ArrayView2<f64>,
    val_labels: &Labels,
    task: &TaskSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SplitModel, f64)> {
    let mut model = init;
    if cfg.epochs > 0 {
        if let Labels::Values(v) = labels {
            let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
            model.pred.last_mut().expect("predictor layer").bias.fill(mean);
        }
    }
    let score = |m: &SplitModel| -> Result<f64> {
        if val_labels.is_empty() {
            return Ok(f64::INFINITY);
        }
        mean_task_loss(m, val_x, val_labels, task)
    };
    let mut best = (score(&model)?, model.clone());
    let mut opt = AdamW::new(
        &model,
        AdamWConfig { learning_rate: cfg.learning_rate, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), rows);
            let pass = model.forward(xb.view())?;
            let (_, g) = task_loss_and_grad(pass.outputs.view(), &labels.select(rows), task)?;
            let grads = model.backward(&pass.cache, Some(g.view()), None)?;
            opt.step(&mut model, &grads)?;
        }
        let val = score(&model)?;
        log::debug!("source epoch {epoch}: val loss {val:.5}");
        if val < best.0 || !best.0.is_finite() {
            best = (val, model.clone());
        }
    }
    Ok((best.1, best.0))
}

/// Supervised training of the whole network on a labelled site.
pub fn train_source(ds: &SiteDataset, cfg: &TrainConfig) -> Result<SplitModel> {
    cfg.validate().stage(Stage::Train)?;
    if ds.train.is_empty() {
        return Err(PipelineError::InvalidConfig("empty training split".into()).at(Stage::Train));
    }
    let task = ds.task;
    let init = SplitModel::mlp(&cfg.architecture(ds.input_dim(), &task), cfg.seed);
    if cfg.folds == 1 {
        let (model, _) = fit_supervised(
            init,
            ds.train.inputs.view(),
            &ds.train.labels,
            ds.val.inputs.view(),
            &ds.val.labels,
            &task,
            cfg,
            cfg.seed,
        )
        .stage(Stage::Train)?;
        return Ok(model);
    }

    let pooled_x = ndarray::concatenate(Axis(0), &[ds.train.inputs.view(), ds.val.inputs.view()])
        .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    let mut all = ds.train.labels.as_f64();
    all.extend(ds.val.labels.as_f64());
    let pooled_labels = match task.is_classification() {
        true => Labels::Classes(all.iter().map(|&v| v as usize).collect()),
        false => Labels::Values(all),
    };
    let n = pooled_x.nrows();
    if n < cfg.folds {
        return Err(PipelineError::InvalidConfig(format!("{n} samples for {} folds", cfg.folds)).at(Stage::Train));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f01d));
    let mut best: Option<(f64, SplitModel)> = None;
    for fold in 0..cfg.folds {
        let (held, kept): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| i % cfg.folds == fold);
        let (model, loss) = fit_supervised(
            init.clone(),
            pooled_x.select(Axis(0), &kept).view(),
            &pooled_labels.select(&kept),
            pooled_x.select(Axis(0), &held).view(),
            &pooled_labels.select(&held),
            &task,
            cfg,
            cfg.seed.wrapping_add(fold as u64),
        )
        .stage(Stage::Train)?;
        log::info!("fold {fold}: held-out loss {loss:.5}");
        if best.as_ref().is_none_or(|(l, _)| loss < *l) {
            best = Some((loss, model));
        }
    }
    Ok(best.expect("at least one fold").1)
}

/// Fits a K-component mixture to every feature of the model's embedding of
/// `inputs` and packages the result with the weights.
pub fn export_features(
    model: &SplitModel,
    inputs: ArrayView2<f64>,
    task: TaskSpec,
    k: usize,
    em: &EmConfig,
    site_id: &str,
) -> Result<StatsBundle> {
    let features: Array2<f64> = model.features(inputs).stage(Stage::Export)?;
    let fit = fit_feature_batch(features.view(), k, &mut WarmStartStore::new(), em).stage(Stage::Export)?;
    if !fit.degenerate.is_empty() {
        log::warn!("{} source features have fewer distinct values than K={k}", fit.degenerate.len());
    }
    StatsBundle::new(model.clone(), fit.params, task, site_id).stage(Stage::Export)
}

/// Source statistics over the full training split, cold-started EM.
pub fn export_stats(
    model: &SplitModel,
    ds: &SiteDataset,
    k: usize,
    em: &EmConfig,
    site_id: &str,
) -> Result<StatsBundle> {
    export_features(model, ds.train.inputs.view(), ds.task, k, em, site_id)
}
