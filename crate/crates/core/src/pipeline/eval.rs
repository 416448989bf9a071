use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};

use super::{PipelineError, Result, Stage, StageExt};
use crate::datasim::SiteDataset;
use crate::divergence::{loss_and_report, DivergenceReport};
use crate::gmm::{fit_feature_batch, EmConfig, WarmStartStore};
use crate::nn::{Labels, NnError, SplitModel, TaskKind};
use crate::statstore::StatsBundle;

/// Network outputs using the adapted extractor and the bundle's predictor.
pub fn infer(adapted: &SplitModel, bundle: &StatsBundle, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let model = adapted.with_predictor_of(&bundle.weights)?;
    Ok(model.predict(x)?)
}

pub fn predict_classes(outputs: &Array2<f64>) -> Vec<usize> {
    outputs
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn check_len(outputs: &Array2<f64>, labels: &Labels) -> Result<()> {
    if outputs.nrows() != labels.len() || labels.is_empty() {
        return Err(NnError::ShapeMismatch(format!("{} outputs for {} labels", outputs.nrows(), labels.len())).into());
    }
    Ok(())
}

/// Percentage of rows whose argmax matches the label.
pub fn accuracy(outputs: &Array2<f64>, labels: &Labels) -> Result<f64> {
    check_len(outputs, labels)?;
    let Labels::Classes(classes) = labels else {
        return Err(PipelineError::UnsupportedTask("accuracy needs class labels".into()));
    };
    let hits = predict_classes(outputs).iter().zip(classes).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / classes.len() as f64)
}

/// Mean absolute error of the first output column.
pub fn mae(outputs: &Array2<f64>, labels: &Labels) -> Result<f64> {
    check_len(outputs, labels)?;
    let Labels::Values(values) = labels else {
        return Err(PipelineError::UnsupportedTask("MAE needs real-valued labels".into()));
    };
    let total: f64 = outputs.column(0).iter().zip(values).map(|(p, y)| (p - y).abs()).sum();
    Ok(total / values.len() as f64)
}

/// Accuracy for classification, MAE for regression.
pub fn site_metric(outputs: &Array2<f64>, labels: &Labels, task: &TaskKind) -> Result<f64> {
    match task {
        TaskKind::Classification { .. } => accuracy(outputs, labels),
        TaskKind::Regression => mae(outputs, labels),
    }
}

/// Distance between the bundle's source mixtures and a cold fit of the
/// model's embedding of `x`.
pub fn alignment(
    model: &SplitModel,
    bundle: &StatsBundle,
    x: ArrayView2<f64>,
    em: &EmConfig,
) -> Result<DivergenceReport> {
    let q = model.features(x)?;
    let fit = fit_feature_batch(q.view(), bundle.meta.k, &mut WarmStartStore::new(), em)?;
    Ok(loss_and_report(&bundle.stats, &fit.params)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteResult {
    pub site: String,
    /// Accuracy in percent or MAE.
    pub metric: f64,
    pub pre_dgmm: f64,
    pub post_dgmm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub per_site: Vec<SiteResult>,
    /// Unweighted mean of the per-site metrics.
    pub average: f64,
}

impl EvalReport {
    pub fn from_sites(metric: impl Into<String>, per_site: Vec<SiteResult>) -> Self {
        let average = per_site.iter().map(|s| s.metric).sum::<f64>() / per_site.len().max(1) as f64;
        Self { metric: metric.into(), per_site, average }
    }

    pub fn metrics(&self) -> Vec<f64> {
        self.per_site.iter().map(|s| s.metric).collect()
    }
}

/// Scores one model per site on that site's test split, with test-set
/// alignment before (bundle weights) and after (the site's model).
pub fn evaluate(
    bundle: &StatsBundle,
    models: &[SplitModel],
    sites: &[(String, &SiteDataset)],
    em: &EmConfig,
) -> Result<EvalReport> {
    if models.len() != sites.len() {
        return Err(PipelineError::InvalidConfig(format!("{} models for {} sites", models.len(), sites.len()))
            .at(Stage::Evaluate));
    }
    let task = bundle.meta.task.kind;
    let mut per_site = Vec::with_capacity(sites.len());
    for (model, (name, ds)) in models.iter().zip(sites) {
        let x = ds.test.inputs.view();
        let outputs = infer(model, bundle, x).stage(Stage::Evaluate)?;
        per_site.push(SiteResult {
            site: name.clone(),
            metric: site_metric(&outputs, &ds.test.labels, &task).stage(Stage::Evaluate)?,
            pre_dgmm: alignment(&bundle.weights, bundle, x, em).stage(Stage::Evaluate)?.mean,
            post_dgmm: alignment(model, bundle, x, em).stage(Stage::Evaluate)?.mean,
        });
    }
    let metric = match task {
        TaskKind::Classification { .. } => "accuracy",
        TaskKind::Regression => "mae",
    };
    Ok(EvalReport::from_sites(metric, per_site))
}

/// Results of several methods over the same sites, keyed by method name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: BTreeMap<String, EvalReport>,
}

impl ExperimentReport {
    pub fn insert(&mut self, method: impl Into<String>, report: EvalReport) {
        self.rows.insert(method.into(), report);
    }

    fn site_names(&self) -> Vec<String> {
        self.rows.values().next().map(|r| r.per_site.iter().map(|s| s.site.clone()).collect()).unwrap_or_default()
    }

    /// Method rows, one column per site and a final average column.
    pub fn to_table(&self) -> String {
        let sites = self.site_names();
        let width = self.rows.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let metric = self.rows.values().next().map(|r| r.metric.as_str()).unwrap_or("metric");
        let _ = writeln!(out, "metric: {metric}");
        let _ = write!(out, "{:<width$}", "method");
        for s in &sites {
            let _ = write!(out, " {s:>9}");
        }
        let _ = writeln!(out, " {:>9}", "average");
        for (method, report) in &self.rows {
            let _ = write!(out, "{method:<width$}");
            for s in &report.per_site {
                let _ = write!(out, " {:>9.2}", s.metric);
            }
            let _ = writeln!(out, " {:>9.2}", report.average);
        }
        out
    }

    /// `method,site,metric,pre_dgmm,post_dgmm`, one line per method and site.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| PipelineError::Io(std::io::Error::other(e));
        w.write_record(["method", "site", "metric", "pre_dgmm", "post_dgmm"]).map_err(io)?;
        for (method, report) in &self.rows {
            for s in &report.per_site {
                w.write_record([
                    method.clone(),
                    s.site.clone(),
                    format!("{:.6}", s.metric),
                    format!("{:.9}", s.pre_dgmm),
                    format!("{:.9}", s.post_dgmm),
                ])
                .map_err(io)?;
            }
            w.write_record([
                method.clone(),
                "average".into(),
                format!("{:.6}", report.average),
                String::new(),
                String::new(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| PipelineError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}
