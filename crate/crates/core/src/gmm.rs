//! Independent one-dimensional Gaussian mixtures, one per feature column,
//! fitted by expectation maximisation.
//!
//! Every mixture is kept in canonical order (ascending mean, ties broken by
//! variance ascending then weight descending) so that components of two
//! mixtures fitted on different sites can be paired by index.

use std::cmp::Ordering;
use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Offset added to the sample variance before scaling by the relative floor.
pub const FLOOR_EPS: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("no samples to fit")]
    EmptyInput,
    #[error("component count must be at least 1")]
    ZeroComponents,
    #[error("initial mixture has {got} components, expected {expected}")]
    InitMismatch { expected: usize, got: usize },
    #[error("invalid mixture: {0}")]
    Invalid(String),
    #[error("feature {feature}: {source}")]
    Feature {
        feature: usize,
        #[source]
        source: Box<GmmError>,
    },
    #[error("mixture sets disagree in shape: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, GmmError>;

/// A K-component mixture over a single real variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm1D {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl Gmm1D {
    /// Builds a mixture, checking the simplex and positivity constraints and
    /// putting components into canonical order.
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let gmm = Self::from_parts_unchecked(weights, means, variances);
        gmm.validate()?;
        Ok(gmm.sorted())
    }

    /// A single Gaussian.
    pub fn single(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub(crate) fn from_parts_unchecked(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Self {
        Self { weights, means, variances }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Checks the structural invariants. Does not check ordering.
    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(GmmError::ZeroComponents);
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(GmmError::Invalid(format!(
                "parameter lengths differ: {} weights, {} means, {} variances",
                k,
                self.means.len(),
                self.variances.len()
            )));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GmmError::Invalid(format!("weights sum to {total}")));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(GmmError::Invalid(format!("negative or NaN weight {w}")));
        }
        if let Some(m) = self.means.iter().find(|m| !m.is_finite()) {
            return Err(GmmError::Invalid(format!("non-finite mean {m}")));
        }
        if let Some(v) = self.variances.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(GmmError::Invalid(format!("non-positive variance {v}")));
        }
        Ok(())
    }

    pub fn is_sorted(&self) -> bool {
        (1..self.k()).all(|j| self.component_order(j - 1, j) != Ordering::Greater)
    }

    fn component_order(&self, a: usize, b: usize) -> Ordering {
        self.means[a]
            .total_cmp(&self.means[b])
            .then(self.variances[a].total_cmp(&self.variances[b]))
            .then(self.weights[b].total_cmp(&self.weights[a]))
    }

    /// Canonical order: mean ascending, then variance ascending, then weight
    /// descending.
    pub fn sorted(self) -> Self {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| self.component_order(a, b));
        Self {
            weights: order.iter().map(|&j| self.weights[j]).collect(),
            means: order.iter().map(|&j| self.means[j]).collect(),
            variances: order.iter().map(|&j| self.variances[j]).collect(),
        }
    }

    /// Per-component `ln(pi_k) + ln N(x; mu_k, var_k)`.
    fn log_joint(&self, x: f64, out: &mut [f64]) {
        for (j, slot) in out.iter_mut().enumerate() {
            let d = x - self.means[j];
            *slot = self.weights[j].ln() - 0.5 * (LN_2PI + self.variances[j].ln() + d * d / self.variances[j]);
        }
    }

    /// Mixture density at `x`.
    pub fn pdf(&self, x: f64) -> f64 {
        (0..self.k())
            .map(|j| {
                let d = x - self.means[j];
                self.weights[j] * (-0.5 * d * d / self.variances[j]).exp() / (2.0 * PI * self.variances[j]).sqrt()
            })
            .sum()
    }

    /// Mean and variance of the whole mixture.
    pub fn moments(&self) -> (f64, f64) {
        let mean: f64 = (0..self.k()).map(|j| self.weights[j] * self.means[j]).sum();
        let second: f64 =
            (0..self.k()).map(|j| self.weights[j] * (self.variances[j] + self.means[j] * self.means[j])).sum();
        (mean, second - mean * mean)
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Total log-likelihood `sum_n ln sum_k pi_k N(x_n; mu_k, var_k)`.
pub fn log_likelihood(gmm: &Gmm1D, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(GmmError::EmptyInput);
    }
    let mut buf = vec![0.0; gmm.k()];
    Ok(samples
        .iter()
        .map(|&x| {
            gmm.log_joint(x, &mut buf);
            log_sum_exp(&buf)
        })
        .sum())
}

/// Posterior component memberships, one row per sample. Computed in log space.
pub fn responsibilities(gmm: &Gmm1D, samples: &[f64]) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Err(GmmError::EmptyInput);
    }
    let mut resp = Array2::<f64>::zeros((samples.len(), gmm.k()));
    e_step(gmm, samples, &mut resp);
    Ok(resp)
}

/// Fills `resp` and returns the log-likelihood of `gmm` on `samples`.
fn e_step(gmm: &Gmm1D, samples: &[f64], resp: &mut Array2<f64>) -> f64 {
    let k = gmm.k();
    let log_w: Vec<f64> = gmm.weights.iter().map(|w| w.ln()).collect();
    let norm_c: Vec<f64> = gmm.variances.iter().map(|v| LN_2PI + v.ln()).collect();
    let mut buf = vec![0.0; k];
    let mut total = 0.0;
    let out = resp.as_slice_mut().expect("standard layout");
    for (row, &x) in out.chunks_exact_mut(k).zip(samples) {
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            let d = x - gmm.means[j];
            buf[j] = log_w[j] - 0.5 * (norm_c[j] + d * d / gmm.variances[j]);
            max = max.max(buf[j]);
        }
        let mut norm = 0.0;
        for j in 0..k {
            let e = (buf[j] - max).exp();
            row[j] = e;
            norm += e;
        }
        for r in row.iter_mut() {
            *r /= norm;
        }
        total += max + norm.ln();
    }
    total
}

/// Responsibility-weighted moments. Components that receive no mass keep
/// their previous mean and variance with zero weight.
fn m_step(samples: &[f64], resp: &Array2<f64>, previous: &Gmm1D, floor: f64) -> Gmm1D {
    let n = samples.len() as f64;
    let k = resp.ncols();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for j in 0..k {
        let col = resp.column(j);
        let mass: f64 = col.iter().sum();
        if mass <= f64::MIN_POSITIVE {
            weights.push(0.0);
            means.push(previous.means[j]);
            variances.push(previous.variances[j].max(floor));
            continue;
        }
        let mean = col.iter().zip(samples).map(|(r, x)| r * x).sum::<f64>() / mass;
        let var = col.iter().zip(samples).map(|(r, x)| r * (x - mean) * (x - mean)).sum::<f64>() / mass;
        weights.push(mass / n);
        means.push(mean);
        variances.push(var.max(floor));
    }
    Gmm1D::from_parts_unchecked(weights, means, variances)
}

/// Expectation-maximisation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Iteration cap for cold starts.
    pub max_iters: usize,
    /// Iteration cap when initialised from a previous estimate.
    pub warm_max_iters: usize,
    /// Absolute log-likelihood change that ends iteration.
    pub loglik_tol: f64,
    /// Variance floor as a fraction of the sample variance of the data
    /// being fitted (plus [`FLOOR_EPS`]).
    pub variance_floor: f64,
    /// Number of cold starts; the first is quantile-initialised, the rest
    /// pick random sample points as means. Highest likelihood wins.
    pub n_restarts: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 100, warm_max_iters: 10, loglik_tol: 1e-6, variance_floor: 1e-6, n_restarts: 1, seed: 0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.warm_max_iters == 0 {
            return Err(GmmError::Invalid("EM iteration caps must be at least 1".into()));
        }
        if !(self.loglik_tol > 0.0) {
            return Err(GmmError::Invalid("loglik_tol must be positive".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(GmmError::Invalid("variance_floor must be positive".into()));
        }
        if self.n_restarts == 0 {
            return Err(GmmError::Invalid("n_restarts must be at least 1".into()));
        }
        Ok(())
    }

    /// Absolute variance floor for a set of samples.
    pub fn floor_for(&self, samples: &[f64]) -> f64 {
        self.variance_floor * (biased_variance(samples) + FLOOR_EPS)
    }
}

fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

fn biased_variance(samples: &[f64]) -> f64 {
    let m = mean(samples);
    samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / samples.len() as f64
}

/// Outcome of one EM fit.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: Gmm1D,
    /// Log-likelihood of the returned mixture.
    pub log_likelihood: f64,
    /// Number of M-steps performed.
    pub iterations: usize,
    /// Log-likelihood evaluated before each M-step.
    pub trace: Vec<f64>,
    /// Set when there were fewer distinct values than components.
    pub degenerate: bool,
}

/// Maximum-likelihood mixture fit by EM.
///
/// With `init` the fit is warm-started from it and capped at
/// `cfg.warm_max_iters`; otherwise `cfg.n_restarts` cold starts are run.
pub fn em_fit(samples: &[f64], k: usize, init: Option<&Gmm1D>, cfg: &EmConfig) -> Result<EmFit> {
    if samples.is_empty() {
        return Err(GmmError::EmptyInput);
    }
    if k == 0 {
        return Err(GmmError::ZeroComponents);
    }
    if let Some(init) = init {
        if init.k() != k {
            return Err(GmmError::InitMismatch { expected: k, got: init.k() });
        }
    }
    cfg.validate()?;
    let floor = cfg.floor_for(samples);

    let mut distinct: Vec<f64> = samples.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < k {
        log::warn!("{} distinct values for {} components; duplicating components", distinct.len(), k);
        return Ok(degenerate_fit(samples, &distinct, k, floor));
    }

    if let Some(init) = init {
        let start = Gmm1D::from_parts_unchecked(
            init.weights.clone(),
            init.means.clone(),
            init.variances.iter().map(|v| v.max(floor)).collect(),
        );
        return Ok(run_em(samples, start, cfg.warm_max_iters, cfg.loglik_tol, floor));
    }

    let mut best: Option<EmFit> = None;
    for restart in 0..cfg.n_restarts {
        let start = if restart == 0 {
            quantile_init(samples, k, floor)
        } else {
            random_init(samples, k, floor, cfg.seed.wrapping_add(restart as u64))
        };
        let fit = run_em(samples, start, cfg.max_iters, cfg.loglik_tol, floor);
        if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.expect("n_restarts >= 1"))
}

fn run_em(samples: &[f64], start: Gmm1D, max_iters: usize, tol: f64, floor: f64) -> EmFit {
    let mut gmm = start;
    let mut resp = Array2::<f64>::zeros((samples.len(), gmm.k()));
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        let ll = e_step(&gmm, samples, &mut resp);
        if let Some(prev) = trace.last() {
            if (ll - prev).abs() < tol {
                trace.push(ll);
                break;
            }
        }
        trace.push(ll);
        gmm = m_step(samples, &resp, &gmm, floor);
        iterations += 1;
    }
    let ll = e_step(&gmm, samples, &mut resp);
    EmFit { gmm: gmm.sorted(), log_likelihood: ll, iterations, trace, degenerate: false }
}

/// Means at the centre quantiles of K equal-mass bins, pooled within-bin
/// variance, uniform weights.
fn quantile_init(samples: &[f64], k: usize, floor: f64) -> Gmm1D {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let means: Vec<f64> = (0..k)
        .map(|j| {
            let q = (j as f64 + 0.5) / k as f64;
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = pos - lo as f64;
            sorted[lo] * (1.0 - t) + sorted[hi] * t
        })
        .collect();
    let mut pooled = 0.0;
    for j in 0..k {
        let bin = &sorted[j * n / k..((j + 1) * n / k).max(j * n / k + 1).min(n)];
        pooled += biased_variance(bin) * bin.len() as f64;
    }
    let pooled = (pooled / n as f64).max(floor);
    Gmm1D::from_parts_unchecked(vec![1.0 / k as f64; k], means, vec![pooled; k])
}

fn random_init(samples: &[f64], k: usize, floor: f64, seed: u64) -> Gmm1D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, samples.len(), k.min(samples.len()));
    let means: Vec<f64> = picks.iter().map(|i| samples[i]).collect();
    let var = (biased_variance(samples) / (k * k) as f64).max(floor);
    Gmm1D::from_parts_unchecked(vec![1.0 / k as f64; k], means, vec![var; k])
}

fn degenerate_fit(samples: &[f64], distinct: &[f64], k: usize, floor: f64) -> EmFit {
    let n = samples.len() as f64;
    let d = distinct.len();
    let mut means = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for j in 0..k {
        let value = distinct[j % d];
        let copies = (k - j % d).div_ceil(d);
        let freq = samples.iter().filter(|&&x| x == value).count() as f64 / n;
        means.push(value);
        weights.push(freq / copies as f64);
    }
    let gmm = Gmm1D::from_parts_unchecked(weights, means, vec![floor; k]).sorted();
    let ll = log_likelihood(&gmm, samples).unwrap_or(f64::NEG_INFINITY);
    EmFit { gmm, log_likelihood: ll, iterations: 0, trace: vec![ll], degenerate: true }
}

/// Per-feature mixtures sharing one component count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    per_feature: Vec<Gmm1D>,
    n_components: usize,
}

impl GmmParams {
    pub fn new(per_feature: Vec<Gmm1D>) -> Result<Self> {
        let n_components =
            per_feature.first().map(Gmm1D::k).ok_or_else(|| GmmError::ShapeMismatch("no features".into()))?;
        for (i, g) in per_feature.iter().enumerate() {
            if g.k() != n_components {
                return Err(GmmError::ShapeMismatch(format!(
                    "feature {i} has {} components, expected {n_components}",
                    g.k()
                )));
            }
            g.validate().map_err(|e| GmmError::Feature { feature: i, source: Box::new(e) })?;
            if !g.is_sorted() {
                return Err(GmmError::Feature {
                    feature: i,
                    source: Box::new(GmmError::Invalid("components not sorted by mean".into())),
                });
            }
        }
        Ok(Self { per_feature, n_components })
    }

    /// Builds from three K x N arrays (row k, column feature).
    pub fn from_arrays(weights: ArrayView2<f64>, means: ArrayView2<f64>, variances: ArrayView2<f64>) -> Result<Self> {
        if weights.dim() != means.dim() || weights.dim() != variances.dim() {
            return Err(GmmError::ShapeMismatch("parameter arrays differ in shape".into()));
        }
        let per_feature = (0..weights.ncols())
            .map(|i| {
                Gmm1D::from_parts_unchecked(
                    weights.column(i).to_vec(),
                    means.column(i).to_vec(),
                    variances.column(i).to_vec(),
                )
            })
            .collect();
        Self::new(per_feature)
    }

    /// The three K x N arrays: weights, means, variances.
    pub fn to_arrays(&self) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let shape = (self.n_components, self.n_features());
        let mut w = Array2::zeros(shape);
        let mut m = Array2::zeros(shape);
        let mut v = Array2::zeros(shape);
        for (i, g) in self.per_feature.iter().enumerate() {
            for j in 0..self.n_components {
                w[[j, i]] = g.weights[j];
                m[[j, i]] = g.means[j];
                v[[j, i]] = g.variances[j];
            }
        }
        (w, m, v)
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_features(&self) -> usize {
        self.per_feature.len()
    }

    pub fn per_feature(&self) -> &[Gmm1D] {
        &self.per_feature
    }

    pub fn feature(&self, i: usize) -> &Gmm1D {
        &self.per_feature[i]
    }
}

/// Previous-batch estimate carried between batches of one epoch.
#[derive(Debug, Clone, Default)]
pub struct WarmStartStore {
    pub state: Option<GmmParams>,
    pub epoch_id: u64,
}

impl WarmStartStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears memory; the next fit is cold-started.
    pub fn reset(&mut self) {
        self.state = None;
    }

    /// Clears memory and records the epoch now being trained.
    pub fn begin_epoch(&mut self, epoch_id: u64) {
        self.reset();
        self.epoch_id = epoch_id;
    }

    pub fn is_empty(&self) -> bool {
        self.state.is_none()
    }
}

/// Functional form of [`WarmStartStore::reset`].
pub fn reset_warm_start(mut warm: WarmStartStore) -> WarmStartStore {
    warm.reset();
    warm
}

/// Result of fitting every column of a feature batch.
#[derive(Debug, Clone)]
pub struct BatchFit {
    pub params: GmmParams,
    /// EM iterations per feature.
    pub iterations: Vec<usize>,
    /// Features that hit the degenerate fallback.
    pub degenerate: Vec<usize>,
}

impl BatchFit {
    pub fn total_iterations(&self) -> usize {
        self.iterations.iter().sum()
    }
}

/// Fits one mixture per column of `features` (B x N). Initialises from
/// `warm` when it holds an estimate, then stores the new estimate there.
pub fn fit_feature_batch(
    features: ArrayView2<f64>,
    k: usize,
    warm: &mut WarmStartStore,
    cfg: &EmConfig,
) -> Result<BatchFit> {
    if features.nrows() == 0 {
        return Err(GmmError::EmptyInput);
    }
    if let Some(state) = &warm.state {
        if state.n_features() != features.ncols() || state.n_components() != k {
            return Err(GmmError::ShapeMismatch(format!(
                "warm state is {}x{}, batch needs {}x{}",
                state.n_components(),
                state.n_features(),
                k,
                features.ncols()
            )));
        }
    }
    let mut per_feature = Vec::with_capacity(features.ncols());
    let mut iterations = Vec::with_capacity(features.ncols());
    let mut degenerate = Vec::new();
    for (i, column) in features.axis_iter(Axis(1)).enumerate() {
        let samples = column_vec(column);
        let init = warm.state.as_ref().map(|s| s.feature(i));
        let fit = em_fit(&samples, k, init, cfg).map_err(|e| GmmError::Feature { feature: i, source: Box::new(e) })?;
        if fit.degenerate {
            degenerate.push(i);
        }
        iterations.push(fit.iterations);
        per_feature.push(fit.gmm);
    }
    let params = GmmParams { per_feature, n_components: k };
    warm.state = Some(params.clone());
    Ok(BatchFit { params, iterations, degenerate })
}

pub(crate) fn column_vec(column: ArrayView1<f64>) -> Vec<f64> {
    column.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    fn normal_samples(n: usize, mean: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(mean, sd).unwrap();
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    }

    fn two_cluster(n: usize, seed: u64) -> Vec<f64> {
        let mut a = normal_samples(n / 2, -4.0, 0.5, seed);
        a.extend(normal_samples(n - n / 2, 4.0, 0.5, seed + 1000));
        a
    }

    #[test]
    fn single_component_is_moment_fit() {
        let xs = normal_samples(500, 0.0, 1.0, 1);
        let fit = em_fit(&xs, 1, None, &EmConfig::default()).unwrap();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        assert_eq!(fit.gmm.weights, vec![1.0]);
        assert_eq!(fit.gmm.means[0], m);
        assert_relative_eq!(fit.gmm.variances[0], v, max_relative = 1e-14);
    }

    #[test]
    fn recovers_two_clusters() {
        let xs = two_cluster(5000, 7);
        let fit = em_fit(&xs, 2, None, &EmConfig::default()).unwrap();
        assert!((fit.gmm.means[0] + 4.0).abs() < 0.1);
        assert!((fit.gmm.means[1] - 4.0).abs() < 0.1);
        assert!((fit.gmm.weights[0] - 0.5).abs() < 0.03);
    }

    #[test]
    fn warm_start_from_truth_moves_less_than_cold_start() {
        let xs = two_cluster(2000, 3);
        let truth = Gmm1D::new(vec![0.5, 0.5], vec![-4.0, 4.0], vec![0.25, 0.25]).unwrap();
        let cfg = EmConfig { max_iters: 1, warm_max_iters: 1, ..EmConfig::default() };
        let warm = em_fit(&xs, 2, Some(&truth), &cfg).unwrap();
        let cold_start = random_init(&xs, 2, cfg.floor_for(&xs), 99);
        let cold = run_em(&xs, cold_start.clone(), 1, cfg.loglik_tol, cfg.floor_for(&xs));
        let warm_delta = warm.log_likelihood - log_likelihood(&truth, &xs).unwrap();
        let cold_delta = cold.log_likelihood - log_likelihood(&cold_start, &xs).unwrap();
        assert!(warm_delta.abs() < cold_delta.abs());
    }

    #[test]
    fn log_likelihood_of_standard_normal_at_zero() {
        let g = Gmm1D::single(0.0, 1.0).unwrap();
        assert_relative_eq!(log_likelihood(&g, &[0.0]).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-12);
    }

    #[test]
    fn log_likelihood_duplicated_sample_doubles() {
        let g = Gmm1D::new(vec![0.3, 0.7], vec![-1.0, 2.0], vec![0.5, 2.0]).unwrap();
        let one = log_likelihood(&g, &[0.37]).unwrap();
        assert_eq!(log_likelihood(&g, &[0.37, 0.37]).unwrap(), 2.0 * one);
    }

    #[test]
    fn log_likelihood_matches_direct_density_sum() {
        let g = Gmm1D::new(vec![0.4, 0.6], vec![-1.5, 1.0], vec![0.7, 1.9]).unwrap();
        let xs = normal_samples(100, 0.0, 2.0, 11);
        let brute: f64 = xs
            .iter()
            .map(|&x| {
                let a = 0.4 * (-(x + 1.5f64).powi(2) / (2.0 * 0.7)).exp() / (2.0 * PI * 0.7).sqrt();
                let b = 0.6 * (-(x - 1.0f64).powi(2) / (2.0 * 1.9)).exp() / (2.0 * PI * 1.9).sqrt();
                (a + b).ln()
            })
            .sum();
        assert_relative_eq!(log_likelihood(&g, &xs).unwrap(), brute, max_relative = 1e-12);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let g = Gmm1D::single(0.0, 1.0).unwrap();
        assert_eq!(log_likelihood(&g, &[]), Err(GmmError::EmptyInput));
        assert!(matches!(responsibilities(&g, &[]), Err(GmmError::EmptyInput)));
        assert!(matches!(em_fit(&[], 2, None, &EmConfig::default()), Err(GmmError::EmptyInput)));
    }

    #[test]
    fn responsibilities_single_component_and_midpoint() {
        let g = Gmm1D::single(3.0, 2.0).unwrap();
        let r = responsibilities(&g, &[-5.0, 0.0, 100.0]).unwrap();
        assert!(r.iter().all(|&v| v == 1.0));

        let g = Gmm1D::new(vec![0.5, 0.5], vec![-2.0, 2.0], vec![1.0, 1.0]).unwrap();
        let r = responsibilities(&g, &[0.0]).unwrap();
        assert_eq!(r[[0, 0]], 0.5);
        assert_eq!(r[[0, 1]], 0.5);
    }

    #[test]
    fn m_step_from_responsibilities_matches_textbook_update() {
        let g = Gmm1D::new(vec![0.35, 0.65], vec![-0.5, 1.5], vec![1.2, 0.8]).unwrap();
        let xs = normal_samples(60, 0.5, 1.5, 5);
        let r = responsibilities(&g, &xs).unwrap();
        let updated = m_step(&xs, &r, &g, 1e-12);

        // Straight-line single EM iteration with densities in linear space.
        let dens = |x: f64, j: usize| {
            g.weights[j] * (-(x - g.means[j]).powi(2) / (2.0 * g.variances[j])).exp()
                / (2.0 * PI * g.variances[j]).sqrt()
        };
        for j in 0..2 {
            let mut nk = 0.0;
            let mut sx = 0.0;
            for &x in &xs {
                let w = dens(x, j) / (dens(x, 0) + dens(x, 1));
                nk += w;
                sx += w * x;
            }
            let mu = sx / nk;
            let mut sv = 0.0;
            for &x in &xs {
                let w = dens(x, j) / (dens(x, 0) + dens(x, 1));
                sv += w * (x - mu) * (x - mu);
            }
            assert_relative_eq!(updated.weights[j], nk / xs.len() as f64, max_relative = 1e-12);
            assert_relative_eq!(updated.means[j], mu, max_relative = 1e-12);
            assert_relative_eq!(updated.variances[j], sv / nk, max_relative = 1e-12);
        }
    }

    #[test]
    fn em_is_monotone() {
        for seed in 0..10 {
            let mut xs = two_cluster(400, seed);
            xs.extend(normal_samples(200, 0.0, 3.0, seed + 50));
            let fit = em_fit(&xs, 3, None, &EmConfig { loglik_tol: 1e-12, ..EmConfig::default() }).unwrap();
            for w in fit.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "loglik decreased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn constant_column_is_degenerate_not_fatal() {
        let fit = em_fit(&[2.5; 10], 3, None, &EmConfig::default()).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.gmm.means, vec![2.5; 3]);
        assert_relative_eq!(fit.gmm.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(fit.gmm.variances.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn fewer_distinct_values_than_components() {
        let fit = em_fit(&[1.0, 1.0, 4.0], 3, None, &EmConfig::default()).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.gmm.k(), 3);
        assert!(fit.gmm.is_sorted());
        fit.gmm.validate().unwrap();
    }

    #[test]
    fn init_component_mismatch() {
        let init = Gmm1D::single(0.0, 1.0).unwrap();
        let err = em_fit(&[0.0, 1.0, 2.0], 2, Some(&init), &EmConfig::default()).unwrap_err();
        assert_eq!(err, GmmError::InitMismatch { expected: 2, got: 1 });
    }

    #[test]
    fn canonical_order_ties() {
        let g = Gmm1D::new(vec![0.2, 0.3, 0.5], vec![1.0, 1.0, 1.0], vec![2.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.variances, vec![1.0, 1.0, 2.0]);
        assert_eq!(g.weights, vec![0.5, 0.3, 0.2]);
        assert_eq!(g.clone().sorted(), g);
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            let shift = if r % 2 == 0 { -3.0 } else { 3.0 };
            shift * (1.0 + c as f64 * 0.1) + dist.sample(&mut rng)
        })
    }

    #[test]
    fn batch_fit_shape_and_order() {
        let x = batch(200, 32, 1);
        let mut warm = WarmStartStore::new();
        let fit = fit_feature_batch(x.view(), 2, &mut warm, &EmConfig::default()).unwrap();
        assert_eq!(fit.params.n_features(), 32);
        assert_eq!(fit.params.n_components(), 2);
        assert!(fit.params.per_feature().iter().all(Gmm1D::is_sorted));
        assert!(warm.state.is_some());
    }

    #[test]
    fn first_batch_equals_cold_fit() {
        let x = batch(50, 4, 2);
        let cfg = EmConfig::default();
        let mut warm = WarmStartStore::new();
        let fit = fit_feature_batch(x.view(), 2, &mut warm, &cfg).unwrap();
        for i in 0..4 {
            let cold = em_fit(&column_vec(x.column(i)), 2, None, &cfg).unwrap();
            assert_eq!(&cold.gmm, fit.params.feature(i));
        }
    }

    #[test]
    fn repeated_batch_converges_faster_with_memory() {
        let x = batch(100, 8, 3);
        let cfg = EmConfig::default();
        let mut warm = WarmStartStore::new();
        let first = fit_feature_batch(x.view(), 2, &mut warm, &cfg).unwrap();
        let second = fit_feature_batch(x.view(), 2, &mut warm, &cfg).unwrap();
        assert!(second.total_iterations() < first.total_iterations());
    }

    #[test]
    fn reset_gives_cold_fit_and_is_idempotent() {
        let x = batch(40, 3, 4);
        let y = batch(40, 3, 5);
        let cfg = EmConfig::default();
        let mut warm = WarmStartStore::new();
        fit_feature_batch(x.view(), 2, &mut warm, &cfg).unwrap();
        let warm = reset_warm_start(reset_warm_start(warm));
        assert!(warm.is_empty());
        let mut warm = warm;
        let after_reset = fit_feature_batch(y.view(), 2, &mut warm, &cfg).unwrap();
        let mut fresh = WarmStartStore::new();
        let cold = fit_feature_batch(y.view(), 2, &mut fresh, &cfg).unwrap();
        assert_eq!(after_reset.params, cold.params);
    }

    #[test]
    fn warm_state_shape_mismatch_is_reported() {
        let mut warm = WarmStartStore::new();
        fit_feature_batch(batch(20, 3, 1).view(), 2, &mut warm, &EmConfig::default()).unwrap();
        let err = fit_feature_batch(batch(20, 4, 1).view(), 2, &mut warm, &EmConfig::default());
        assert!(matches!(err, Err(GmmError::ShapeMismatch(_))));
    }

    #[test]
    fn arrays_round_trip() {
        let x = batch(60, 5, 9);
        let mut warm = WarmStartStore::new();
        let p = fit_feature_batch(x.view(), 3, &mut warm, &EmConfig::default()).unwrap().params;
        let (w, m, v) = p.to_arrays();
        assert_eq!(w.dim(), (3, 5));
        let back = GmmParams::from_arrays(w.view(), m.view(), v.view()).unwrap();
        assert_eq!(back, p);
    }
}
