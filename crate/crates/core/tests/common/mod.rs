//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfharmony_core::divergence::loss_gradient;
use sfharmony_core::nn::{task_loss_and_grad, Activation, Dense, Labels};
use sfharmony_core::{Gmm1D, GmmParams, SplitModel, TaskSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn refine(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> f64 {
    let (lm, flm, left) = simpson(f, a, fa, m, fm);
    let (rm, frm, right) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        return left + right + delta / 15.0;
    }
    refine(f, a, fa, m, fm, lm, flm, left, eps / 2.0, depth - 1)
        + refine(f, m, fm, b, fb, rm, frm, right, eps / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over [a, b] to absolute tolerance `eps`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    refine(f, a, fa, b, fb, m, fm, whole, eps, 60)
}

fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// -ln of the Bhattacharyya coefficient, integrated numerically.
pub fn bhattacharyya_quadrature(mu_p: f64, var_p: f64, mu_q: f64, var_q: f64) -> f64 {
    let f = |x: f64| (normal_pdf(x, mu_p, var_p) * normal_pdf(x, mu_q, var_q)).sqrt();
    // sqrt(pq) is an unnormalised Gaussian; cover 40 of its standard deviations
    let precision = 0.5 * (1.0 / var_p + 1.0 / var_q);
    let centre = 0.5 * (mu_p / var_p + mu_q / var_q) / precision;
    let half = 20.0 / precision.sqrt();
    let peak = f(centre);
    // split at the centre so the first Simpson estimate sees the peak
    let bc = adaptive_simpson(&f, centre - half, centre, 1e-13 * peak)
        + adaptive_simpson(&f, centre, centre + half, 1e-13 * peak);
    -bc.ln()
}

pub fn random_gmm(r: &mut ChaCha8Rng, k: usize) -> Gmm1D {
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Gmm1D::new(
        raw.iter().map(|w| w / total).collect(),
        (0..k).map(|_| r.random_range(-5.0..5.0)).collect(),
        (0..k).map(|_| r.random_range(0.05..4.0)).collect(),
    )
    .expect("valid mixture")
}

pub fn random_params(r: &mut ChaCha8Rng, n: usize, k: usize) -> GmmParams {
    GmmParams::new((0..n).map(|_| random_gmm(r, k)).collect()).expect("valid params")
}

/// Strictly positive responsibilities summing to one over components.
pub fn random_resp(r: &mut ChaCha8Rng, b: usize, k: usize, n: usize) -> Array3<f64> {
    let mut out = Array3::zeros((b, k, n));
    for s in 0..b {
        for i in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            for c in 0..k {
                out[[s, c, i]] = raw[c] / total;
            }
        }
    }
    out
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-scale..scale))
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor).
pub fn max_relative_error(pairs: impl IntoIterator<Item = (f64, f64)>, floor: f64) -> f64 {
    pairs.into_iter().map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

/// Worst relative error of `loss_gradient` against central differences on
/// one random instance.
pub fn feature_gradient_error(seed: u64, b: usize, n: usize, k: usize) -> f64 {
    let mut r = rng(seed);
    let features = random_matrix(&mut r, b, n, 3.0);
    let source = random_params(&mut r, n, k);
    let resp = random_resp(&mut r, b, k, n);
    let floors = vec![1e-12; n];
    let (_, analytic) = loss_gradient(features.view(), &source, resp.view(), &floors).expect("gradient");
    let h = 1e-5;
    let mut pairs = Vec::with_capacity(b * n);
    for s in 0..b {
        for i in 0..n {
            let at = |delta: f64| {
                let mut x = features.clone();
                x[[s, i]] += delta;
                loss_gradient(x.view(), &source, resp.view(), &floors).expect("loss").0
            };
            pairs.push((analytic.grad[[s, i]], (at(h) - at(-h)) / (2.0 * h)));
        }
    }
    max_relative_error(pairs, 1e-6)
}

/// Worst relative error of every parameter gradient of a two-layer model
/// for the objective task_loss(outputs) + <features, tap>.
pub fn network_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layer = |r: &mut ChaCha8Rng, i: usize, o: usize, activation| Dense {
        weight: random_matrix(r, i, o, 0.8),
        bias: random_matrix(r, 1, o, 0.3).row(0).to_owned(),
        activation,
    };
    let model =
        SplitModel::new(vec![layer(&mut r, 5, 4, Activation::Relu)], vec![layer(&mut r, 4, 3, Activation::Linear)])
            .expect("model");
    let x = random_matrix(&mut r, 6, 5, 1.0);
    let tap = random_matrix(&mut r, 6, 4, 1.0);
    let labels = Labels::Classes((0..6).map(|i| i % 3).collect());
    let task = TaskSpec::classification(3);
    let objective = |m: &SplitModel| {
        let pass = m.forward(x.view()).expect("forward");
        let (loss, _) = task_loss_and_grad(pass.outputs.view(), &labels, &task).expect("loss");
        loss + (&pass.features * &tap).sum()
    };
    let pass = model.forward(x.view()).expect("forward");
    let (_, g_out) = task_loss_and_grad(pass.outputs.view(), &labels, &task).expect("loss");
    let grads = model.backward(&pass.cache, Some(g_out.view()), Some(tap.view())).expect("backward");

    let h = 1e-6;
    let mut pairs = Vec::new();
    let n_repr = model.repr.len();
    let analytic: Vec<_> = grads.repr.iter().chain(&grads.pred).collect();
    for (li, g) in analytic.iter().enumerate() {
        let perturbed = |f: &dyn Fn(&mut Dense)| {
            let mut m = model.clone();
            let l = if li < n_repr { &mut m.repr[li] } else { &mut m.pred[li - n_repr] };
            f(l);
            objective(&m)
        };
        for ((i, j), &a) in g.weight.indexed_iter() {
            let plus = perturbed(&|l: &mut Dense| l.weight[[i, j]] += h);
            let minus = perturbed(&|l: &mut Dense| l.weight[[i, j]] -= h);
            pairs.push((a, (plus - minus) / (2.0 * h)));
        }
        for (j, &a) in g.bias.indexed_iter() {
            let plus = perturbed(&|l: &mut Dense| l.bias[j] += h);
            let minus = perturbed(&|l: &mut Dense| l.bias[j] -= h);
            pairs.push((a, (plus - minus) / (2.0 * h)));
        }
    }
    max_relative_error(pairs, 1e-6)
}

pub fn src(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("src").join(rel)
}

pub fn rust_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).expect("source directory") {
        let path = entry.expect("entry").path();
        if path.is_dir() {
            out.extend(rust_files(&path));
        } else if path.extension().is_some_and(|e| e == "rs") {
            out.push(path);
        }
    }
    out
}

/// First banned word found in the file, if any.
pub fn mentions(path: &Path, banned: &[&str]) -> Option<String> {
    let text = fs::read_to_string(path).expect("readable source");
    banned.iter().find(|w| text.contains(*w)).map(|w| format!("{} mentions {w}", path.display()))
}

pub const STATSTORE_BANNED: &[&str] = &["datasim", "SiteDataset", "FeatureBatch", "Labels", ".features(", ".forward("];
pub const ADAPT_BANNED: &[&str] = &["datasim", "SiteDataset", "Labels", "train_source", "export_stats"];
pub const ADAPT_FILES: &[&str] = &["pipeline/adapt.rs", "divergence.rs", "gmm.rs"];

/// Every structural source-freeness violation.
pub fn architecture_violations() -> Vec<String> {
    let mut out: Vec<String> =
        rust_files(&src("statstore")).iter().filter_map(|f| mentions(f, STATSTORE_BANNED)).collect();
    out.extend(ADAPT_FILES.iter().filter_map(|f| mentions(&src(f), ADAPT_BANNED)));
    out
}
