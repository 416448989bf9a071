//! Manifest-driven end-to-end runs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    adapt_target_traced, evaluate, export_stats, train_source, AdaptConfig, ExperimentReport, Objective, PipelineError,
    Result, Stage, StageExt, TrainConfig,
};
use crate::datasim::{
    apply_shift, generate_base, make_regression, read_sfds, remove_classes, GenConfig, ShiftKind, ShiftSpec,
    SiteDataset,
};
use crate::gmm::EmConfig;
use crate::nn::SplitModel;
use crate::statstore::{apply_dp_noise, serialize_checkpoint, DpConfig, Registry, StatsBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub task: TaskName,
    /// Ignored for regression.
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub val_fraction: f64,
    pub width: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            task: TaskName::Classification,
            n_classes: 11,
            n_train: g.n_train,
            n_test: g.n_test,
            val_fraction: g.val_fraction,
            width: g.width,
        }
    }
}

impl DataSection {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig { n_train: self.n_train, n_test: self.n_test, val_fraction: self.val_fraction, width: self.width }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub name: String,
    pub shift: ShiftKind,
    /// Load this SFDS file instead of generating the site.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

/// Which runs to perform beyond the unadapted source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Any of `sfharmony`, `entropy`, `direct_fit`, `no_memory`.
    pub methods: Vec<String>,
    /// Empty means `adapt.batch_size` only.
    pub batch_sizes: Vec<usize>,
    /// Component counts for `sfharmony` and `no_memory`; empty means `adapt.k`.
    pub ks: Vec<usize>,
    /// Weight-noise fractions; each adds an `sfharmony` run on a noised bundle.
    pub dp_fractions: Vec<f64>,
    /// Numbers of classes removed from every non-source site; each adds
    /// `sfharmony` and `entropy` runs.
    pub removal_levels: Vec<usize>,
    /// Train the source model with `adapt.folds`-fold cross-validation.
    pub cross_validate: bool,
    /// When non-zero, `adapt.learning_rate` applies at this batch size and
    /// other batch sizes scale it linearly.
    pub lr_reference_batch: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            methods: vec!["sfharmony".into(), "entropy".into()],
            batch_sizes: Vec::new(),
            ks: Vec::new(),
            dp_fractions: Vec::new(),
            removal_levels: Vec::new(),
            cross_validate: false,
            lr_reference_batch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    pub sites: Vec<SiteEntry>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut m = Self::from_toml(&text)?;
        // relative paths are relative to the manifest
        let base = path.parent().unwrap_or(Path::new("."));
        for site in &mut m.sites {
            if let Some(p) = &site.path {
                if p.is_relative() {
                    site.path = Some(base.join(p));
                }
            }
        }
        m.check_paths()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PipelineError::Manifest(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Manifest(m));
        let sources = self.sites.iter().filter(|s| s.shift == ShiftKind::None).count();
        if sources != 1 {
            return bad(format!("exactly one site must have shift none, found {sources}"));
        }
        let names: BTreeSet<&str> = self.sites.iter().map(|s| s.name.as_str()).collect();
        if names.len() != self.sites.len() {
            return bad("site names must be unique".into());
        }
        if let Some(s) = self.sites.iter().find(|s| s.name.is_empty() || s.name.contains(['/', '\\', ','])) {
            return bad(format!("unusable site name {:?}", s.name));
        }
        for m in &self.experiment.methods {
            if !["sfharmony", "entropy", "direct_fit", "no_memory"].contains(&m.as_str()) {
                return bad(format!("unknown method {m:?}"));
            }
        }
        if self.batch_sizes().contains(&0) || self.ks().contains(&0) {
            return bad("batch sizes and K must be positive".into());
        }
        if self.data.task == TaskName::Classification && self.data.n_classes < 2 {
            return bad("classification needs at least two classes".into());
        }
        if self.experiment.dp_fractions.iter().any(|f| !(*f >= 0.0)) {
            return bad("dp fractions must be non-negative".into());
        }
        self.adapt.validate()?;
        self.em.validate()?;
        Ok(())
    }

    fn check_paths(&self) -> Result<()> {
        for site in &self.sites {
            if let Some(p) = &site.path {
                if !p.exists() {
                    return Err(PipelineError::Manifest(format!(
                        "site {} path {} does not exist",
                        site.name,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        match self.experiment.batch_sizes.is_empty() {
            true => vec![self.adapt.batch_size],
            false => self.experiment.batch_sizes.clone(),
        }
    }

    pub fn ks(&self) -> Vec<usize> {
        match self.experiment.ks.is_empty() {
            true => vec![self.adapt.k],
            false => self.experiment.ks.clone(),
        }
    }

    pub fn source_index(&self) -> usize {
        self.sites.iter().position(|s| s.shift == ShiftKind::None).expect("validated manifest has a source")
    }
}

/// The five-site benchmark: an unshifted source and four acquisition shifts.
pub fn default_sites() -> Vec<SiteEntry> {
    [
        ShiftKind::None,
        ShiftKind::IntensityDown(0.5),
        ShiftKind::IntensityUp(1.5),
        ShiftKind::GaussianBlur(1.0),
        ShiftKind::SaltPepper(0.1),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, shift)| SiteEntry { name: format!("site{}", i + 1), shift, path: None })
    .collect()
}

/// Builds every site: an independent draw of the base data per site, then
/// that site's shift.
pub fn generate_sites(manifest: &Manifest) -> Result<Vec<SiteDataset>> {
    let gen = manifest.data.gen_config();
    manifest
        .sites
        .iter()
        .enumerate()
        .map(|(i, site)| {
            if let Some(p) = &site.path {
                return Ok(read_sfds(fs::File::open(p)?)?);
            }
            let seed = manifest.seed.wrapping_mul(1000).wrapping_add(i as u64);
            let base = match manifest.data.task {
                TaskName::Classification => generate_base(&gen, manifest.data.n_classes, seed),
                TaskName::Regression => make_regression(&gen, seed),
            };
            Ok(apply_shift(&base, ShiftSpec::new(site.shift, seed ^ 0x5417))?)
        })
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Generate)
}

struct Runner<'a> {
    manifest: &'a Manifest,
    sites: &'a [SiteDataset],
    out: &'a Path,
    report: ExperimentReport,
}

impl Runner<'_> {
    fn named(&self, sites: &[SiteDataset]) -> Vec<String> {
        self.manifest.sites.iter().take(sites.len()).map(|s| s.name.clone()).collect()
    }

    /// Adapts every site with one method and records its evaluation.
    fn run_method(
        &mut self,
        label: &str,
        bundle: &StatsBundle,
        objective: Objective,
        cfg: &AdaptConfig,
        targets: &[SiteDataset],
    ) -> Result<()> {
        log::info!("running {label}");
        let mut models = Vec::with_capacity(targets.len());
        for (i, target) in targets.iter().enumerate() {
            let site_cfg = AdaptConfig { seed: cfg.seed.wrapping_add(i as u64), ..*cfg };
            let outcome = adapt_target_traced(bundle, &target.unlabelled(), &site_cfg, objective)?;
            log::info!(
                "{label} {}: val loss {:.5} -> {:.5} (best epoch {})",
                self.manifest.sites[i].name,
                outcome.trace.val_loss[0],
                outcome.trace.val_loss[outcome.trace.best],
                outcome.trace.best
            );
            models.push(outcome.model);
        }
        self.record(label, bundle, &models)
    }

    fn record(&mut self, label: &str, bundle: &StatsBundle, models: &[SplitModel]) -> Result<()> {
        let names = self.named(self.sites);
        let pairs: Vec<(String, &SiteDataset)> = names.into_iter().zip(self.sites.iter()).collect();
        let report = evaluate(bundle, models, &pairs, &self.manifest.em)?;
        let dir = self.out.join("checkpoints").join(label);
        fs::create_dir_all(&dir).stage(Stage::Report)?;
        for (model, (name, _)) in models.iter().zip(&pairs) {
            let bytes = serialize_checkpoint(model, &bundle.meta.task)?;
            fs::write(dir.join(format!("{name}.sfhw")), bytes).stage(Stage::Report)?;
        }
        log::info!("{label}: average {:.3}", report.average);
        self.report.insert(label, report);
        Ok(())
    }
}

/// generate, train, export, optional weight noise, adapt every site with
/// every configured method, evaluate. Writes `report.txt`, `report.csv`,
/// the source bundles (as a registry) and per-method checkpoints under
/// the manifest's output directory.
pub fn run_experiment(manifest: &Manifest) -> Result<ExperimentReport> {
    manifest.validate()?;
    let out = manifest.output_dir.as_path();
    fs::create_dir_all(out).stage(Stage::Report)?;
    let sites = generate_sites(manifest)?;
    let src_idx = manifest.source_index();
    let source_name = manifest.sites[src_idx].name.clone();
    let exp = &manifest.experiment;

    let mut train_cfg = manifest.train.clone();
    train_cfg.seed = manifest.seed;
    if exp.cross_validate {
        train_cfg.folds = manifest.adapt.folds;
    }
    let model = train_source(&sites[src_idx], &train_cfg)?;

    let registry = Registry::new(out.join("registry"));
    let (batch_sizes, exp_ks) = (manifest.batch_sizes(), manifest.ks());
    let mut ks: BTreeSet<usize> = exp_ks.iter().copied().collect();
    if exp.methods.iter().any(|m| m == "direct_fit") {
        ks.insert(1);
    }
    let mut bundles = std::collections::BTreeMap::new();
    for &k in &ks {
        let em = EmConfig { seed: manifest.seed, ..manifest.em };
        let bundle = export_stats(&model, &sites[src_idx], k, &em, &format!("{source_name}-k{k}"))?;
        registry.push(&bundle).stage(Stage::Export)?;
        bundles.insert(k, bundle);
    }
    let k0 = exp_ks[0];
    let b0 = batch_sizes[0];
    let base_cfg = AdaptConfig { em: manifest.em, seed: manifest.seed, ..manifest.adapt };
    let lr_for = |b: usize| match exp.lr_reference_batch {
        0 => base_cfg.learning_rate,
        r => base_cfg.learning_rate * b as f64 / r as f64,
    };
    let classification = manifest.data.task == TaskName::Classification;

    let mut runner = Runner { manifest, sites: &sites, out, report: ExperimentReport::default() };
    let models: Vec<SplitModel> = sites.iter().map(|_| model.clone()).collect();
    runner.record("source", &bundles[&k0], &models)?;

    for &b in &batch_sizes {
        for method in &exp.methods {
            match method.as_str() {
                "sfharmony" | "no_memory" => {
                    for &k in &exp_ks {
                        let memory = method == "sfharmony";
                        let cfg = AdaptConfig {
                            k,
                            batch_size: b,
                            batch_memory: memory,
                            learning_rate: lr_for(b),
                            ..base_cfg
                        };
                        runner.run_method(
                            &format!("{method}_k{k}_b{b}"),
                            &bundles[&k],
                            Objective::Dgmm,
                            &cfg,
                            &sites,
                        )?;
                    }
                }
                "direct_fit" => {
                    let cfg = AdaptConfig { k: 1, batch_size: b, learning_rate: lr_for(b), ..base_cfg };
                    runner.run_method(&format!("direct_fit_b{b}"), &bundles[&1], Objective::DirectFit, &cfg, &sites)?;
                }
                "entropy" if classification => {
                    let cfg = AdaptConfig { k: k0, batch_size: b, learning_rate: lr_for(b), ..base_cfg };
                    runner.run_method(&format!("entropy_b{b}"), &bundles[&k0], Objective::Entropy, &cfg, &sites)?;
                }
                _ => log::warn!("skipping {method} for a regression task"),
            }
        }
    }

    let cfg = AdaptConfig { k: k0, batch_size: b0, learning_rate: lr_for(b0), ..base_cfg };
    for &f in &exp.dp_fractions {
        let dp = DpConfig { amplitude_fraction: f, ..manifest.dp };
        let noisy = apply_dp_noise(&bundles[&k0], &dp).stage(Stage::Privacy)?;
        runner.run_method(&format!("sfharmony_k{k0}_b{b0}_dp{f}"), &noisy, Objective::Dgmm, &cfg, &sites)?;
    }

    for &r in &exp.removal_levels {
        if !classification {
            return Err(PipelineError::Manifest("class removal needs a classification task".into()));
        }
        let removed: BTreeSet<usize> = (0..r).collect();
        let targets = sites
            .iter()
            .enumerate()
            .map(|(i, s)| if i == src_idx { Ok(s.clone()) } else { remove_classes(s, &removed) })
            .collect::<std::result::Result<Vec<_>, _>>()
            .stage(Stage::Generate)?;
        runner.run_method(&format!("sfharmony_k{k0}_b{b0}_rm{r}"), &bundles[&k0], Objective::Dgmm, &cfg, &targets)?;
        runner.run_method(&format!("entropy_b{b0}_rm{r}"), &bundles[&k0], Objective::Entropy, &cfg, &targets)?;
    }

    let report = runner.report;
    fs::write(out.join("report.txt"), report.to_table()).stage(Stage::Report)?;
    fs::write(out.join("report.csv"), report.to_csv()?).stage(Stage::Report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 3
output_dir = "OUT"

[data]
n_classes = 3
n_train = 120
n_test = 40

[[sites]]
name = "site1"
shift = { kind = "none" }

[[sites]]
name = "site2"
shift = { kind = "gaussian_blur", param = 1.0 }

[train]
hidden = [8]
feature_dim = 4
epochs = 2

[adapt]
epochs = 2
learning_rate = 1e-3

[experiment]
methods = ["sfharmony", "entropy", "direct_fit", "no_memory"]
batch_sizes = [10]
ks = [2]
dp_fractions = [0.1]
removal_levels = [1]
"#;

    fn manifest(dir: &Path) -> Manifest {
        let mut m = Manifest::from_toml(SMALL).unwrap();
        m.output_dir = dir.to_path_buf();
        m
    }

    #[test]
    fn manifest_validation() {
        let m = Manifest::from_toml(SMALL).unwrap();
        assert_eq!(m.sites.len(), 2);
        assert_eq!(m.adapt.batch_size, 5);
        assert_eq!(Manifest::from_toml(&m.to_toml().unwrap()).unwrap(), m);

        let two_sources = SMALL.replace("gaussian_blur\", param = 1.0", "none\"");
        assert!(matches!(Manifest::from_toml(&two_sources), Err(PipelineError::Manifest(_))));
        let unknown = SMALL.replace("\"no_memory\"]", "\"magic\"]");
        assert!(matches!(Manifest::from_toml(&unknown), Err(PipelineError::Manifest(_))));
        assert!(Manifest::from_toml("seed = ").is_err());
    }

    #[test]
    fn end_to_end_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_experiment(&manifest(a.path())).unwrap();
        let rb = run_experiment(&manifest(b.path())).unwrap();
        assert_eq!(ra, rb);
        let ta = fs::read(a.path().join("report.txt")).unwrap();
        assert_eq!(ta, fs::read(b.path().join("report.txt")).unwrap());
        assert_eq!(fs::read(a.path().join("report.csv")).unwrap(), fs::read(b.path().join("report.csv")).unwrap());
        let keys: Vec<&str> = ra.rows.keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            vec![
                "direct_fit_b10",
                "entropy_b10",
                "entropy_b10_rm1",
                "no_memory_k2_b10",
                "sfharmony_k2_b10",
                "sfharmony_k2_b10_dp0.1",
                "sfharmony_k2_b10_rm1",
                "source"
            ]
        );
        assert!(a.path().join("checkpoints/source/site2.sfhw").exists());
        assert_eq!(Registry::new(a.path().join("registry")).versions("site1-k2").unwrap().len(), 1);
    }

    #[test]
    fn stage_tags_surface() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(dir.path());
        m.experiment.removal_levels = vec![3];
        let err = run_experiment(&m).unwrap_err();
        assert!(err.to_string().starts_with("[generate]"), "{err}");
    }
}
