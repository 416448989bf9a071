//! Target-side adaptation. Everything here works from a bundle and
//! unlabelled inputs only.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, Stage, StageExt, TargetData};
use crate::divergence::{batch_responsibilities, loss_and_report, loss_gradient};
use crate::gmm::{column_vec, fit_feature_batch, EmConfig, WarmStartStore};
use crate::nn::{entropy_loss_and_grad, AdamW, AdamWConfig, SplitModel};
use crate::statstore::StatsBundle;

/// What the extractor is trained to minimise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mean paired mixture distance to the source statistics, target
    /// mixtures fitted by EM.
    Dgmm,
    /// As `Dgmm` with K=1 and raw batch moments instead of EM.
    DirectFit,
    /// Mean Shannon entropy of the predictor's softmax.
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub em: EmConfig,
    /// Epochs without a validation improvement before stopping; 0 never stops.
    pub early_stop_patience: usize,
    /// Cross-validation folds used when fold training is switched on.
    pub folds: usize,
    /// Warm-start each batch's EM from the previous batch of the epoch.
    pub batch_memory: bool,
    /// Seed the first batch of every epoch with the source mixtures instead
    /// of a cold start.
    pub warm_from_source: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k: 2,
            epochs: 100,
            batch_size: 5,
            learning_rate: 1e-6,
            weight_decay: 0.01,
            em: EmConfig::default(),
            early_stop_patience: 10,
            folds: 5,
            batch_memory: true,
            warm_from_source: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(PipelineError::InvalidConfig("k must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(PipelineError::InvalidConfig(format!(
                "batch size {} cannot define a variance",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        self.em.validate()?;
        Ok(())
    }
}

/// Loss history of one adaptation run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptTrace {
    /// Mean training-batch loss of each completed epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss before training, then after each epoch.
    pub val_loss: Vec<f64>,
    /// Index into `val_loss` of the returned checkpoint.
    pub best: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: SplitModel,
    pub trace: AdaptTrace,
}

/// Variance floor for every column of a feature batch.
fn floors(features: ArrayView2<f64>, em: &EmConfig) -> Vec<f64> {
    features.axis_iter(Axis(1)).map(|c| em.floor_for(&column_vec(c))).collect()
}

struct Loop<'a> {
    bundle: &'a StatsBundle,
    cfg: &'a AdaptConfig,
    objective: Objective,
}

impl Loop<'_> {
    fn val_loss(&self, model: &SplitModel, x: ArrayView2<f64>) -> Result<f64> {
        match self.objective {
            Objective::Entropy => {
                let out = model.predict(x)?;
                Ok(entropy_loss_and_grad(out.view()).0)
            }
            Objective::Dgmm | Objective::DirectFit => {
                // a fresh store: validation never sees the training batches' estimate
                let q = model.features(x)?;
                let fit = fit_feature_batch(q.view(), self.cfg.k, &mut WarmStartStore::new(), &self.cfg.em)?;
                Ok(loss_and_report(&self.bundle.stats, &fit.params)?.mean)
            }
        }
    }

    /// Loss on one batch and the parameter update direction.
    fn batch_step(
        &self,
        model: &SplitModel,
        x: ArrayView2<f64>,
        warm: &mut WarmStartStore,
    ) -> Result<(f64, crate::nn::Gradients)> {
        let pass = model.forward(x)?;
        match self.objective {
            Objective::Entropy => {
                let (loss, g) = entropy_loss_and_grad(pass.outputs.view());
                Ok((loss, model.backward(&pass.cache, Some(g.view()), None)?))
            }
            Objective::Dgmm | Objective::DirectFit => {
                let q = pass.features.view();
                let resp = if self.objective == Objective::DirectFit {
                    Array3::ones((q.nrows(), 1, q.ncols()))
                } else {
                    if !self.cfg.batch_memory {
                        warm.reset();
                    }
                    let fit = fit_feature_batch(q, self.cfg.k, warm, &self.cfg.em)?;
                    batch_responsibilities(q, &fit.params)?
                };
                let (loss, g) = loss_gradient(q, &self.bundle.stats, resp.view(), &floors(q, &self.cfg.em))?;
                Ok((loss, model.backward(&pass.cache, None, Some(g.grad.view()))?))
            }
        }
    }

    fn run(&self, target: &TargetData) -> Result<AdaptOutcome> {
        let cfg = self.cfg;
        if target.train.ncols() != self.bundle.weights.input_dim() || target.val.ncols() != target.train.ncols() {
            return Err(crate::nn::NnError::ShapeMismatch(format!(
                "target inputs have {} columns, model expects {}",
                target.train.ncols(),
                self.bundle.weights.input_dim()
            ))
            .into());
        }
        if target.val.nrows() < 2 {
            return Err(PipelineError::InvalidConfig("target validation split needs at least two rows".into()));
        }
        let mut model = self.bundle.weights.clone().frozen();
        let mut opt = AdamW::new(
            &model,
            AdamWConfig { learning_rate: cfg.learning_rate, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        );
        let mut trace = AdaptTrace::default();
        let initial = self.val_loss(&model, target.val.view())?;
        trace.val_loss.push(initial);
        let mut best = (initial, model.clone());
        let mut since_best = 0;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..target.train.nrows()).collect();
        let mut warm = WarmStartStore::new();
        for epoch in 0..cfg.epochs {
            warm.begin_epoch(epoch as u64);
            if cfg.warm_from_source && self.objective == Objective::Dgmm {
                warm.state = Some(self.bundle.stats.clone());
            }
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for rows in order.chunks(cfg.batch_size) {
                if rows.len() < 2 {
                    continue;
                }
                let x: Array2<f64> = target.train.select(Axis(0), rows);
                let (loss, grads) = self.batch_step(&model, x.view(), &mut warm)?;
                opt.step(&mut model, &grads)?;
                total += loss;
                batches += 1;
            }
            trace.train_loss.push(total / batches.max(1) as f64);

            let val = self.val_loss(&model, target.val.view())?;
            trace.val_loss.push(val);
            log::debug!("adapt epoch {epoch}: train {:.6} val {val:.6}", trace.train_loss[epoch]);
            if val < best.0 {
                best = (val, model.clone());
                trace.best = epoch + 1;
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                    trace.stopped_early = true;
                    break;
                }
            }
        }
        Ok(AdaptOutcome { model: best.1, trace })
    }
}

fn check_k(bundle: &StatsBundle, k: usize) -> Result<()> {
    if bundle.meta.k != k {
        return Err(PipelineError::ComponentCountMismatch { bundle: bundle.meta.k, config: k });
    }
    Ok(())
}

/// Runs one adaptation loop with the given objective and returns the
/// best-validation checkpoint with its loss history.
pub fn adapt_target_traced(
    bundle: &StatsBundle,
    target: &TargetData,
    cfg: &AdaptConfig,
    objective: Objective,
) -> Result<AdaptOutcome> {
    let checks = || -> Result<()> {
        cfg.validate()?;
        bundle.validate()?;
        match objective {
            Objective::Dgmm => check_k(bundle, cfg.k),
            Objective::DirectFit => {
                check_k(bundle, 1)?;
                check_k(bundle, cfg.k)
            }
            Objective::Entropy => match bundle.meta.task.is_classification() {
                true => Ok(()),
                false => Err(PipelineError::UnsupportedTask("entropy minimisation needs softmax outputs".into())),
            },
        }
    };
    checks().stage(Stage::Adapt)?;
    Loop { bundle, cfg, objective }.run(target).stage(Stage::Adapt)
}

/// Fine-tunes the feature extractor so the target embedding's mixtures
/// match the bundle's source mixtures. The predictor stays frozen.
pub fn adapt_target(bundle: &StatsBundle, target: &TargetData, cfg: &AdaptConfig) -> Result<SplitModel> {
    Ok(adapt_target_traced(bundle, target, cfg, Objective::Dgmm)?.model)
}

/// Same loop, minimising prediction entropy instead.
pub fn baseline_entropy_min(bundle: &StatsBundle, target: &TargetData, cfg: &AdaptConfig) -> Result<SplitModel> {
    Ok(adapt_target_traced(bundle, target, cfg, Objective::Entropy)?.model)
}

/// Same loop with single Gaussians from raw batch moments. Needs K=1.
pub fn baseline_direct_fit(bundle: &StatsBundle, target: &TargetData, cfg: &AdaptConfig) -> Result<SplitModel> {
    Ok(adapt_target_traced(bundle, target, cfg, Objective::DirectFit)?.model)
}
