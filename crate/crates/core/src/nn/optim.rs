use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{DenseGrad, Gradients, NnError, Result, SplitModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, weight_decay: 0.01, betas: (0.9, 0.999), epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    repr: Vec<Moments>,
    pred: Vec<Moments>,
}

impl AdamW {
    pub fn new(model: &SplitModel, config: AdamWConfig) -> Self {
        let zeros = |l: &super::Dense| Moments {
            m_w: Array2::zeros(l.weight.raw_dim()),
            v_w: Array2::zeros(l.weight.raw_dim()),
            m_b: Array1::zeros(l.bias.raw_dim()),
            v_b: Array1::zeros(l.bias.raw_dim()),
        };
        Self {
            config,
            step: 0,
            repr: model.repr.iter().map(zeros).collect(),
            pred: model.pred.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Predictor layers are skipped when the model's
    /// predictor is frozen.
    pub fn step(&mut self, model: &mut SplitModel, grads: &Gradients) -> Result<()> {
        if grads.repr.len() != model.repr.len() || grads.pred.len() != model.pred.len() {
            return Err(NnError::ShapeMismatch("gradient layer count differs from model".into()));
        }
        for (l, g) in model.layers().map(|(_, l)| l).zip(grads.all()) {
            if l.weight.raw_dim() != g.weight.raw_dim() || l.bias.raw_dim() != g.bias.raw_dim() {
                return Err(NnError::ShapeMismatch("gradient shape differs from parameter".into()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.betas.0.powi(t);
        let bias2 = 1.0 - c.betas.1.powi(t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *p *= 1.0 - c.learning_rate * c.weight_decay;
            *m = c.betas.0 * *m + (1.0 - c.betas.0) * g;
            *v = c.betas.1 * *v + (1.0 - c.betas.1) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        };
        let apply = |layer: &mut super::Dense, g: &DenseGrad, mo: &mut Moments| {
            Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut mo.m_w)
                .and(&mut mo.v_w)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut mo.m_b)
                .and(&mut mo.v_b)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        };
        for ((layer, g), mo) in model.repr.iter_mut().zip(&grads.repr).zip(&mut self.repr) {
            apply(layer, g, mo);
        }
        if !model.is_predictor_frozen() {
            for ((layer, g), mo) in model.pred.iter_mut().zip(&grads.pred).zip(&mut self.pred) {
                apply(layer, g, mo);
            }
        }
        model.bump_revision();
        Ok(())
    }
}
