use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ShiftSpec, SiteDataset, Split};
use crate::nn::{Labels, TaskSpec};

/// Number of bar orientations; classes beyond it reuse the orientations at a
/// brighter level.
const N_ANGLES: usize = 6;
const LEVELS: [f64; 3] = [0.45, 0.85, 0.65];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Training samples, including the validation fraction.
    pub n_train: usize,
    pub n_test: usize,
    pub val_fraction: f64,
    /// Image side length in pixels.
    pub width: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n_train: 5000, n_test: 2000, val_fraction: 0.2, width: 16 }
    }
}

impl GenConfig {
    fn split_sizes(&self) -> (usize, usize, usize) {
        let n_val = (self.n_train as f64 * self.val_fraction).round() as usize;
        (self.n_train - n_val, n_val, self.n_test)
    }
}

struct Bar {
    angle: f64,
    offset: f64,
    thickness: f64,
    intensity: f64,
    background: f64,
}

fn render(bar: &Bar, width: usize, noise: &Normal<f64>, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let (s, c) = bar.angle.sin_cos();
    let centre = width as f64 / 2.0;
    for y in 0..width {
        for x in 0..width {
            let px = x as f64 + 0.5 - centre;
            let py = y as f64 + 0.5 - centre;
            let d = -s * px + c * py - bar.offset;
            let v = bar.background
                + bar.intensity * (-d * d / (2.0 * bar.thickness * bar.thickness)).exp()
                + noise.sample(rng);
            out[y * width + x] = v.clamp(0.0, 1.0);
        }
    }
}

fn split_rows(inputs: Array2<f64>, labels: Labels, sizes: (usize, usize, usize)) -> [Split; 3] {
    let (a, b, _) = sizes;
    let all: Vec<usize> = (0..inputs.nrows()).collect();
    let (tr, rest) = all.split_at(a);
    let (va, te) = rest.split_at(b);
    [tr, va, te].map(|rows| Split { inputs: inputs.select(ndarray::Axis(0), rows), labels: labels.select(rows) })
}

/// Class-conditional oriented bars: the class picks the orientation and the
/// brightness level; position, thickness, brightness and pixel noise are
/// jittered per sample. Classes are balanced to within one sample.
pub fn generate_base(cfg: &GenConfig, n_classes: usize, seed: u64) -> SiteDataset {
    assert!(n_classes >= 2, "need at least two classes");
    let sizes = cfg.split_sizes();
    let n = sizes.0 + sizes.1 + sizes.2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    classes.shuffle(&mut rng);

    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let angle_jitter = Normal::new(0.0, 4.0f64.to_radians()).expect("valid std");
    let d = cfg.width * cfg.width;
    let mut inputs = Array2::zeros((n, d));
    for (row, &class) in classes.iter().enumerate() {
        let angle_slot = class % N_ANGLES;
        let level = LEVELS[(class / N_ANGLES) % LEVELS.len()];
        let bar = Bar {
            angle: angle_slot as f64 * PI / N_ANGLES as f64 + angle_jitter.sample(&mut rng),
            offset: rng.random_range(-2.0..2.0),
            thickness: rng.random_range(0.7..1.4),
            intensity: level + rng.random_range(-0.07..0.07),
            background: rng.random_range(0.05..0.15),
        };
        let out = inputs.row_mut(row).into_slice().expect("standard layout");
        render(&bar, cfg.width, &noise, &mut rng, out);
    }
    let [train, val, test] = split_rows(inputs, Labels::Classes(classes), sizes);
    SiteDataset {
        width: cfg.width,
        task: TaskSpec::classification(n_classes),
        shift: ShiftSpec::none(),
        train,
        val,
        test,
    }
}

const THICKNESS_RANGE: (f64, f64) = (0.5, 2.5);

/// Target for a bar of the given thickness, scaled to [0, 100].
pub fn regression_target(thickness: f64) -> f64 {
    100.0 * (thickness - THICKNESS_RANGE.0) / (THICKNESS_RANGE.1 - THICKNESS_RANGE.0)
}

/// Bars of random orientation whose thickness is the regression target.
pub fn make_regression(cfg: &GenConfig, seed: u64) -> SiteDataset {
    make_regression_with_latents(cfg, seed).0
}

/// As [`make_regression`], also returning each row's latent thickness for
/// the train, validation and test splits.
pub fn make_regression_with_latents(cfg: &GenConfig, seed: u64) -> (SiteDataset, [Vec<f64>; 3]) {
    let sizes = cfg.split_sizes();
    let n = sizes.0 + sizes.1 + sizes.2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let d = cfg.width * cfg.width;
    let mut inputs = Array2::zeros((n, d));
    let mut latents = Vec::with_capacity(n);
    for row in 0..n {
        let thickness = rng.random_range(THICKNESS_RANGE.0..THICKNESS_RANGE.1);
        let bar = Bar {
            angle: rng.random_range(0.0..PI),
            offset: rng.random_range(-1.5..1.5),
            thickness,
            intensity: 0.7 + rng.random_range(-0.07..0.07),
            background: rng.random_range(0.05..0.15),
        };
        let out = inputs.row_mut(row).into_slice().expect("standard layout");
        render(&bar, cfg.width, &noise, &mut rng, out);
        latents.push(thickness);
    }
    let targets = latents.iter().map(|&t| regression_target(t)).collect();
    let [train, val, test] = split_rows(inputs, Labels::Values(targets), sizes);
    let (a, b, _) = sizes;
    let latent_splits = [latents[..a].to_vec(), latents[a..a + b].to_vec(), latents[a + b..].to_vec()];
    let ds = SiteDataset { width: cfg.width, task: TaskSpec::regression(), shift: ShiftSpec::none(), train, val, test };
    (ds, latent_splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{task_loss_and_grad, AdamW, AdamWConfig, Architecture, SplitModel};

    fn cfg(n_train: usize, n_test: usize) -> GenConfig {
        GenConfig { n_train, n_test, ..GenConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_base(&cfg(200, 50), 11, 9);
        let b = generate_base(&cfg(200, 50), 11, 9);
        assert_eq!(a, b);
        assert_ne!(a, generate_base(&cfg(200, 50), 11, 10));
        assert_eq!(make_regression(&cfg(80, 20), 4), make_regression(&cfg(80, 20), 4));
    }

    #[test]
    fn split_sizes_and_pixel_range() {
        let ds = generate_base(&cfg(500, 100), 4, 1);
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (400, 100, 100));
        assert!(ds.splits().iter().all(|s| s.inputs.iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert_eq!(ds.input_dim(), 256);
    }

    #[test]
    fn classes_are_balanced() {
        let ds = generate_base(&cfg(4000, 1000), 11, 5);
        let mut counts = [0usize; 11];
        for split in ds.splits() {
            let Labels::Classes(c) = &split.labels else { unreachable!() };
            for &l in c {
                counts[l] += 1;
            }
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(max / min <= 1.1, "{counts:?}");
    }

    #[test]
    fn linear_probe_beats_chance() {
        let ds = generate_base(&cfg(1500, 400), 11, 2);
        let arch = Architecture { input_dim: 256, hidden: vec![], feature_dim: 11, output_dim: 11 };
        // one linear layer feeding a linear head is still a linear probe
        let mut model = SplitModel::mlp(&arch, 1);
        model.repr[0].activation = crate::nn::Activation::Linear;
        let spec = TaskSpec::classification(11);
        let mut opt = AdamW::new(&model, AdamWConfig { learning_rate: 1e-2, ..AdamWConfig::default() });
        for _ in 0..30 {
            for start in (0..ds.train.len()).step_by(100) {
                let rows: Vec<usize> = (start..(start + 100).min(ds.train.len())).collect();
                let x = ds.train.inputs.select(ndarray::Axis(0), &rows);
                let pass = model.forward(x.view()).unwrap();
                let (_, g) = task_loss_and_grad(pass.outputs.view(), &ds.train.labels.select(&rows), &spec).unwrap();
                let grads = model.backward(&pass.cache, Some(g.view()), None).unwrap();
                opt.step(&mut model, &grads).unwrap();
            }
        }
        let out = model.predict(ds.test.inputs.view()).unwrap();
        let Labels::Classes(labels) = &ds.test.labels else { unreachable!() };
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(r, &l)| {
                let row = out.row(*r);
                let argmax = (0..11).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                argmax == l
            })
            .count();
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc > 2.0 / 11.0, "probe accuracy {acc}");
    }

    #[test]
    fn regression_targets_are_spread_and_recoverable_from_latents() {
        let (ds, latents) = make_regression_with_latents(&cfg(600, 200), 3);
        let Labels::Values(y) = &ds.test.labels else { unreachable!() };
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
        assert!(var > 0.0);
        assert!(y.iter().all(|v| (0.0..=100.0).contains(v)));

        // least-squares line on the training latents, evaluated on test
        let Labels::Values(ytr) = &ds.train.labels else { unreachable!() };
        let t = &latents[0];
        let n = t.len() as f64;
        let (mt, my) = (t.iter().sum::<f64>() / n, ytr.iter().sum::<f64>() / n);
        let cov: f64 = t.iter().zip(ytr).map(|(a, b)| (a - mt) * (b - my)).sum();
        let vt: f64 = t.iter().map(|a| (a - mt).powi(2)).sum();
        let slope = cov / vt;
        let mae =
            latents[2].iter().zip(y).map(|(l, v)| (my + slope * (l - mt) - v).abs()).sum::<f64>() / y.len() as f64;
        assert!(mae < 100.0 / 20.0, "oracle MAE {mae}");
    }
}
