//! Bhattacharyya distances between Gaussians and Gaussian mixtures, and the
//! gradient of the mean paired mixture distance with respect to the target
//! feature values.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{self, Gmm1D, GmmParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivergenceError {
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("component counts differ: source {source_k}, target {target_k}")]
    ComponentCountMismatch { source_k: usize, target_k: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at sample {sample}, feature {feature}")]
    NonFiniteGradient { sample: usize, feature: usize },
}

pub type Result<T> = std::result::Result<T, DivergenceError>;

/// Closed-form Bhattacharyya distance between `N(mu_p, var_p)` and
/// `N(mu_q, var_q)`.
pub fn bhattacharyya_gaussian(mu_p: f64, var_p: f64, mu_q: f64, var_q: f64) -> Result<f64> {
    if !(var_p > 0.0) {
        return Err(DivergenceError::NonPositiveVariance(var_p));
    }
    if !(var_q > 0.0) {
        return Err(DivergenceError::NonPositiveVariance(var_q));
    }
    Ok(bc_terms(mu_p, var_p, mu_q, var_q))
}

#[inline]
fn bc_terms(mu_p: f64, var_p: f64, mu_q: f64, var_q: f64) -> f64 {
    let sum = var_p + var_q;
    let d = mu_p - mu_q;
    0.25 * d * d / sum + 0.5 * (sum / (2.0 * (var_p * var_q).sqrt())).ln()
}

fn check_variances(g: &Gmm1D) -> Result<()> {
    match g.variances.iter().find(|v| !(**v > 0.0)) {
        Some(v) => Err(DivergenceError::NonPositiveVariance(*v)),
        None => Ok(()),
    }
}

/// Weighted sum of Bhattacharyya distances between index-matched components
/// of two canonically ordered mixtures.
pub fn d_gmm_paired(source: &Gmm1D, target: &Gmm1D) -> Result<f64> {
    if source.k() != target.k() {
        return Err(DivergenceError::ComponentCountMismatch { source_k: source.k(), target_k: target.k() });
    }
    check_variances(source)?;
    check_variances(target)?;
    Ok((0..source.k())
        .map(|j| {
            source.weights[j]
                * target.weights[j]
                * bc_terms(source.means[j], source.variances[j], target.means[j], target.variances[j])
        })
        .sum())
}

/// Weighted sum over every (source, target) component pair.
pub fn d_gmm_crosspair(source: &Gmm1D, target: &Gmm1D) -> Result<f64> {
    check_variances(source)?;
    check_variances(target)?;
    let mut total = 0.0;
    for j in 0..source.k() {
        for l in 0..target.k() {
            total += source.weights[j]
                * target.weights[l]
                * bc_terms(source.means[j], source.variances[j], target.means[l], target.variances[l]);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Paired,
    CrossPair,
}

/// Per-feature distances and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub per_feature: Vec<f64>,
    pub mean: f64,
    pub variant: Variant,
}

fn check_shapes(source: &GmmParams, target: &GmmParams) -> Result<()> {
    if source.n_features() != target.n_features() {
        return Err(DivergenceError::ShapeMismatch(format!(
            "{} source features vs {} target features",
            source.n_features(),
            target.n_features()
        )));
    }
    if source.n_components() != target.n_components() {
        return Err(DivergenceError::ComponentCountMismatch {
            source_k: source.n_components(),
            target_k: target.n_components(),
        });
    }
    Ok(())
}

fn mean_in_order(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean paired distance across features, with the per-feature breakdown.
pub fn loss_and_report(source: &GmmParams, target: &GmmParams) -> Result<DivergenceReport> {
    report_with(source, target, Variant::Paired)
}

pub fn report_with(source: &GmmParams, target: &GmmParams, variant: Variant) -> Result<DivergenceReport> {
    if variant == Variant::Paired {
        check_shapes(source, target)?;
    } else if source.n_features() != target.n_features() {
        return Err(DivergenceError::ShapeMismatch("feature counts differ".into()));
    }
    let per_feature = source
        .per_feature()
        .iter()
        .zip(target.per_feature())
        .map(|(s, t)| match variant {
            Variant::Paired => d_gmm_paired(s, t),
            Variant::CrossPair => d_gmm_crosspair(s, t),
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_in_order(&per_feature);
    Ok(DivergenceReport { per_feature, mean, variant })
}

/// Per-sample, per-component, per-feature responsibilities (B x K x N).
pub type Responsibilities = Array3<f64>;

/// E-step of every feature's fitted mixture on the batch, stacked as B x K x N.
pub fn batch_responsibilities(features: ArrayView2<f64>, fitted: &GmmParams) -> Result<Responsibilities> {
    let (b, n) = features.dim();
    if fitted.n_features() != n {
        return Err(DivergenceError::ShapeMismatch(format!(
            "{} fitted features for a {n}-feature batch",
            fitted.n_features()
        )));
    }
    let k = fitted.n_components();
    let mut out = Array3::zeros((b, k, n));
    for i in 0..n {
        let col = gmm::column_vec(features.column(i));
        let r = gmm::responsibilities(fitted.feature(i), &col)
            .map_err(|e| DivergenceError::ShapeMismatch(e.to_string()))?;
        for s in 0..b {
            for j in 0..k {
                out[[s, j, i]] = r[[s, j]];
            }
        }
    }
    Ok(out)
}

/// Target mixture parameters as responsibility-weighted batch moments.
#[derive(Debug, Clone)]
pub struct MomentFit {
    /// K x N arrays.
    pub weights: Array2<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    /// Component mass per (k, feature).
    pub mass: Array2<f64>,
    /// True where the raw variance fell below the floor.
    pub saturated: Array2<bool>,
}

/// Responsibility-weighted moments. `floors[i]` is the absolute variance
/// floor for feature `i`.
pub fn moment_fit(features: ArrayView2<f64>, resp: ArrayView3<f64>, floors: &[f64]) -> Result<MomentFit> {
    let (b, n) = features.dim();
    let (rb, k, rn) = resp.dim();
    if rb != b || rn != n || floors.len() != n {
        return Err(DivergenceError::ShapeMismatch(format!(
            "features {b}x{n}, responsibilities {rb}x{k}x{rn}, {} floors",
            floors.len()
        )));
    }
    let mut fit = MomentFit {
        weights: Array2::zeros((k, n)),
        means: Array2::zeros((k, n)),
        variances: Array2::zeros((k, n)),
        mass: Array2::zeros((k, n)),
        saturated: Array2::from_elem((k, n), false),
    };
    for i in 0..n {
        for j in 0..k {
            let mut mass = 0.0;
            let mut sx = 0.0;
            for s in 0..b {
                let r = resp[[s, j, i]];
                mass += r;
                sx += r * features[[s, i]];
            }
            fit.mass[[j, i]] = mass;
            fit.weights[[j, i]] = mass / b as f64;
            if mass <= f64::MIN_POSITIVE {
                fit.variances[[j, i]] = floors[i];
                fit.saturated[[j, i]] = true;
                continue;
            }
            let mu = sx / mass;
            let mut sv = 0.0;
            for s in 0..b {
                let d = features[[s, i]] - mu;
                sv += resp[[s, j, i]] * d * d;
            }
            let var = sv / mass;
            fit.means[[j, i]] = mu;
            if var < floors[i] {
                fit.variances[[j, i]] = floors[i];
                fit.saturated[[j, i]] = true;
            } else {
                fit.variances[[j, i]] = var;
            }
        }
    }
    Ok(fit)
}

/// Gradient of the adaptation loss with respect to each feature entry.
#[derive(Debug, Clone)]
pub struct FeatureGradient {
    /// B x N.
    pub grad: Array2<f64>,
}

/// Mean paired distance between `source` and the responsibility-weighted
/// moments of `features`, plus its gradient with respect to `features`.
///
/// Responsibilities are held constant, so target weights carry no gradient
/// and only the component means and variances do. Variances clamped at the
/// floor contribute nothing.
pub fn loss_gradient(
    features: ArrayView2<f64>,
    source: &GmmParams,
    resp: ArrayView3<f64>,
    floors: &[f64],
) -> Result<(f64, FeatureGradient)> {
    let (b, n) = features.dim();
    if source.n_features() != n {
        return Err(DivergenceError::ShapeMismatch(format!(
            "{} source features for a {n}-feature batch",
            source.n_features()
        )));
    }
    if resp.dim().1 != source.n_components() {
        return Err(DivergenceError::ComponentCountMismatch {
            source_k: source.n_components(),
            target_k: resp.dim().1,
        });
    }
    let fit = moment_fit(features, resp, floors)?;
    let k = source.n_components();
    let inv_n = 1.0 / n as f64;
    let mut per_feature = vec![0.0; n];
    let mut grad = Array2::<f64>::zeros((b, n));
    for i in 0..n {
        let src = source.feature(i);
        for j in 0..k {
            let (ps, ms, vs) = (src.weights[j], src.means[j], src.variances[j]);
            let (pt, mt, vt) = (fit.weights[[j, i]], fit.means[[j, i]], fit.variances[[j, i]]);
            if !(vs > 0.0) {
                return Err(DivergenceError::NonPositiveVariance(vs));
            }
            let mass = fit.mass[[j, i]];
            if mass <= f64::MIN_POSITIVE {
                continue;
            }
            per_feature[i] += ps * pt * bc_terms(ms, vs, mt, vt);

            let sum = vs + vt;
            let d = mt - ms;
            let coeff = ps * pt * inv_n;
            let d_mu = coeff * 0.5 * d / sum;
            let d_var =
                if fit.saturated[[j, i]] { 0.0 } else { coeff * (-0.25 * d * d / (sum * sum) + 0.5 / sum - 0.25 / vt) };
            for s in 0..b {
                let r = resp[[s, j, i]];
                let x = features[[s, i]];
                grad[[s, i]] += r / mass * (d_mu + 2.0 * d_var * (x - mt));
            }
        }
    }
    if let Some(((sample, feature), _)) = grad.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(DivergenceError::NonFiniteGradient { sample, feature });
    }
    Ok((mean_in_order(&per_feature), FeatureGradient { grad }))
}
