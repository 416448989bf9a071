use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::{Result, StatsBundle, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    /// Noise scale as a fraction of each weight's magnitude.
    pub amplitude_fraction: f64,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { amplitude_fraction: 0.0, seed: 0 }
    }
}

/// Laplace(0, b) as a symmetric exponential.
fn laplace(b: f64, rng: &mut ChaCha8Rng) -> f64 {
    let e: f64 = Exp1.sample(rng);
    if rng.random::<bool>() {
        b * e
    } else {
        -b * e
    }
}

/// Adds Laplace noise of scale `|w| * f` to every weight and bias. The
/// mixture statistics are left alone.
pub fn apply_dp_noise(bundle: &StatsBundle, dp: &DpConfig) -> Result<StatsBundle> {
    let f = dp.amplitude_fraction;
    if !(f >= 0.0 && f.is_finite()) {
        return Err(StoreError::InvariantViolation(format!("amplitude fraction {f}")));
    }
    let mut out = bundle.clone();
    if f == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dp.seed);
    let model = &mut out.weights;
    for layer in model.repr.iter_mut().chain(model.pred.iter_mut()) {
        for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            // draw even for zero weights so the stream does not depend on values
            let n = laplace(w.abs() * f, &mut rng);
            *w += n;
        }
    }
    model.bump_revision();
    Ok(out)
}
