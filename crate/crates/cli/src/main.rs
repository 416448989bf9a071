//! `sfharmony`: generate sites, train and export a source model, adapt,
//! infer, evaluate, or run a whole manifest.
//!
//! Exit status is 0 on success, 1 when a stage fails and 2 on a usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use sfharmony_core::datasim::{read_sfds, write_sfds};
use sfharmony_core::pipeline::{
    adapt_target_traced, default_sites, evaluate, export_stats, generate_sites, infer, predict_classes, run_experiment,
    train_source, AdaptConfig, DataSection, ExperimentReport, Manifest, Objective, PipelineError, Stage, TaskName,
    TrainConfig,
};
use sfharmony_core::statstore::{
    apply_dp_noise, deserialize, deserialize_checkpoint, serialize, serialize_checkpoint, DpConfig, Registry,
};
use sfharmony_core::{EmConfig, SiteDataset, SplitModel, StatsBundle};

#[derive(Debug, Parser)]
#[command(name = "sfharmony", version, about)]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, env = "SFH_SEED", default_value_t = 0)]
    seed: u64,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one SFDS file per site: a source and shifted targets.
    Gen(GenArgs),
    /// Supervised training on a labelled site; writes a checkpoint.
    Train(TrainArgs),
    /// Fit source statistics and write a stats bundle.
    Export(ExportArgs),
    /// Source-free adaptation of a bundle's extractor to a target site.
    Adapt(AdaptArgs),
    /// Predictions of an adapted extractor plus the bundle's predictor, as CSV.
    Infer(InferArgs),
    /// Score adapted checkpoints on their sites' test splits.
    Eval(EvalArgs),
    /// Run every stage described by a manifest.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Regression,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "classification")]
    task: TaskArg,
    /// Number of sites; the first is the unshifted source.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=5))]
    sites: u8,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 2000)]
    n_test: usize,
    #[arg(long, default_value_t = 11)]
    n_classes: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Labelled SFDS site.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    folds: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Source checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Source SFDS site; statistics come from its training split.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "source")]
    site_id: String,
    /// Laplace weight noise as a fraction of each weight's magnitude.
    #[arg(long)]
    dp: Option<f64>,
    /// Also push the bundle to this registry.
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Sfharmony,
    Entropy,
    DirectFit,
}

#[derive(Debug, Args)]
struct BundleSource {
    /// Stats bundle file.
    #[arg(long, required_unless_present = "registry", conflicts_with = "registry")]
    bundle: Option<PathBuf>,
    /// Pull the bundle from this registry instead.
    #[arg(long, requires = "site_id")]
    registry: Option<PathBuf>,
    #[arg(long)]
    site_id: Option<String>,
    /// Registry version; the latest when absent.
    #[arg(long, requires = "registry")]
    version: Option<String>,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[command(flatten)]
    source: BundleSource,
    /// Target SFDS site; labels are never read.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sfharmony")]
    method: Method,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-6)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Epochs without improvement before stopping; 0 never stops.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Cold-start EM on every batch.
    #[arg(long)]
    no_memory: bool,
    /// Start each epoch's EM from the source mixtures.
    #[arg(long)]
    warm_from_source: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    source: BundleSource,
    /// Adapted checkpoint; the bundle's own weights when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    source: BundleSource,
    /// SFDS sites, in the same order as --model.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// One checkpoint per site.
    #[arg(long, required = true, num_args = 1..)]
    model: Vec<PathBuf>,
    /// Row label in the report.
    #[arg(long, default_value = "adapted")]
    method: String,
    /// Directory for report.txt and report.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the manifest's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Pipeline(#[from] PipelineError),
    #[error("[{stage}] {path}: {source}")]
    File {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("[{0}] {1}")]
    Invalid(Stage, String),
}

type Result<T> = std::result::Result<T, CliError>;

fn tagged<E: Into<PipelineError>>(stage: Stage) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Pipeline(e.into().at(stage))
}

fn read_file(path: &Path, stage: Stage) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::File { stage, path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8], stage: Stage) -> Result<()> {
    let file = |source| CliError::File { stage, path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file)?;
    }
    fs::write(path, bytes).map_err(file)
}

fn load_site(path: &Path, stage: Stage) -> Result<SiteDataset> {
    read_sfds(read_file(path, stage)?.as_slice()).map_err(tagged(stage))
}

fn load_checkpoint(path: &Path, stage: Stage) -> Result<SplitModel> {
    Ok(deserialize_checkpoint(&read_file(path, stage)?).map_err(tagged(stage))?.0)
}

fn load_bundle(src: &BundleSource, stage: Stage) -> Result<StatsBundle> {
    match (&src.bundle, &src.registry, &src.site_id) {
        (Some(path), _, _) => deserialize(&read_file(path, stage)?).map_err(tagged(stage)),
        (None, Some(root), Some(site)) => Registry::new(root).pull(site, src.version.as_deref()).map_err(tagged(stage)),
        _ => Err(CliError::Invalid(stage, "need --bundle or --registry with --site-id".into())),
    }
}

fn cmd_gen(args: &GenArgs, seed: u64) -> Result<()> {
    let manifest = Manifest {
        seed,
        output_dir: args.out.clone(),
        data: DataSection {
            task: match args.task {
                TaskArg::Classification => TaskName::Classification,
                TaskArg::Regression => TaskName::Regression,
            },
            n_classes: args.n_classes,
            n_train: args.n_train,
            n_test: args.n_test,
            ..DataSection::default()
        },
        sites: default_sites().into_iter().take(args.sites as usize).collect(),
        train: TrainConfig::default(),
        em: EmConfig::default(),
        adapt: AdaptConfig::default(),
        dp: DpConfig::default(),
        experiment: Default::default(),
    };
    manifest.validate().map_err(tagged(Stage::Generate))?;
    let sites = generate_sites(&manifest)?;
    for (entry, ds) in manifest.sites.iter().zip(&sites) {
        let mut bytes = Vec::new();
        write_sfds(ds, &mut bytes).map_err(tagged(Stage::Generate))?;
        let path = args.out.join(format!("{}.sfds", entry.name));
        write_file(&path, &bytes, Stage::Generate)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<()> {
    let ds = load_site(&args.data, Stage::Train)?;
    let cfg = TrainConfig {
        hidden: args.hidden.clone(),
        feature_dim: args.feature_dim,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        folds: args.folds,
        seed,
    };
    let model = train_source(&ds, &cfg)?;
    let bytes = serialize_checkpoint(&model, &ds.task).map_err(tagged(Stage::Train))?;
    write_file(&args.out, &bytes, Stage::Train)
}

fn cmd_export(args: &ExportArgs, seed: u64) -> Result<()> {
    let model = load_checkpoint(&args.model, Stage::Export)?;
    let ds = load_site(&args.data, Stage::Export)?;
    let em = EmConfig { seed, ..EmConfig::default() };
    let mut bundle = export_stats(&model, &ds, args.k, &em, &args.site_id)?;
    if let Some(f) = args.dp {
        bundle = apply_dp_noise(&bundle, &DpConfig { amplitude_fraction: f, seed }).map_err(tagged(Stage::Privacy))?;
    }
    write_file(&args.out, &serialize(&bundle).map_err(tagged(Stage::Export))?, Stage::Export)?;
    if let Some(root) = &args.registry {
        let version = Registry::new(root).push(&bundle).map_err(tagged(Stage::Export))?;
        println!("{version}");
    }
    Ok(())
}

fn cmd_adapt(args: &AdaptArgs, seed: u64) -> Result<()> {
    let bundle = load_bundle(&args.source, Stage::Adapt)?;
    let target = load_site(&args.data, Stage::Adapt)?.unlabelled();
    let objective = match args.method {
        Method::Sfharmony => Objective::Dgmm,
        Method::Entropy => Objective::Entropy,
        Method::DirectFit => Objective::DirectFit,
    };
    let cfg = AdaptConfig {
        k: args.k,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        em: EmConfig { seed, ..EmConfig::default() },
        early_stop_patience: args.patience,
        batch_memory: !args.no_memory,
        warm_from_source: args.warm_from_source,
        seed,
        ..AdaptConfig::default()
    };
    let outcome = adapt_target_traced(&bundle, &target, &cfg, objective)?;
    let t = &outcome.trace;
    log::info!("validation loss {:.6} -> {:.6} (best epoch {})", t.val_loss[0], t.val_loss[t.best], t.best);
    let bytes = serialize_checkpoint(&outcome.model, &bundle.meta.task).map_err(tagged(Stage::Adapt))?;
    write_file(&args.out, &bytes, Stage::Adapt)
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let bundle = load_bundle(&args.source, Stage::Evaluate)?;
    let model = match &args.model {
        Some(p) => load_checkpoint(p, Stage::Evaluate)?,
        None => bundle.weights.clone(),
    };
    let ds = load_site(&args.data, Stage::Evaluate)?;
    let split = match args.split {
        SplitArg::Train => &ds.train,
        SplitArg::Val => &ds.val,
        SplitArg::Test => &ds.test,
    };
    let outputs = infer(&model, &bundle, split.inputs.view()).map_err(|e| e.at(Stage::Evaluate))?;
    let labels = split.labels.as_f64();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Invalid(Stage::Report, e.to_string());
    w.write_record(["row", "prediction", "label"]).map_err(csv_err)?;
    let predictions: Vec<String> = if bundle.meta.task.is_classification() {
        predict_classes(&outputs).iter().map(|c| c.to_string()).collect()
    } else {
        outputs.column(0).iter().map(|v| format!("{v:.9}")).collect()
    };
    for (i, (p, y)) in predictions.iter().zip(&labels).enumerate() {
        w.write_record([i.to_string(), p.clone(), format!("{y}")]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Invalid(Stage::Report, e.to_string()))?;
    write_file(&args.out, &bytes, Stage::Report)
}

fn cmd_eval(args: &EvalArgs, seed: u64) -> Result<()> {
    if args.data.len() != args.model.len() {
        return Err(CliError::Invalid(
            Stage::Evaluate,
            format!("{} sites but {} checkpoints", args.data.len(), args.model.len()),
        ));
    }
    let bundle = load_bundle(&args.source, Stage::Evaluate)?;
    let sites = args.data.iter().map(|p| load_site(p, Stage::Evaluate)).collect::<Result<Vec<_>>>()?;
    let models = args.model.iter().map(|p| load_checkpoint(p, Stage::Evaluate)).collect::<Result<Vec<_>>>()?;
    let named: Vec<(String, &SiteDataset)> = args
        .data
        .iter()
        .zip(&sites)
        .map(|(p, ds)| (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), ds))
        .collect();
    let em = EmConfig { seed, ..EmConfig::default() };
    let mut report = ExperimentReport::default();
    report.insert(args.method.clone(), evaluate(&bundle, &models, &named, &em)?);
    write_report(&report, &args.out)
}

fn write_report(report: &ExperimentReport, out: &Path) -> Result<()> {
    let table = report.to_table();
    write_file(&out.join("report.txt"), table.as_bytes(), Stage::Report)?;
    write_file(&out.join("report.csv"), report.to_csv()?.as_bytes(), Stage::Report)?;
    print!("{table}");
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut manifest = Manifest::load(&args.manifest).map_err(tagged(Stage::Generate))?;
    if let Some(out) = &args.out {
        manifest.output_dir = out.clone();
    }
    let report = run_experiment(&manifest)?;
    print!("{}", report.to_table());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Export(a) => cmd_export(a, cli.seed),
        Command::Adapt(a) => cmd_adapt(a, cli.seed),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a, cli.seed),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
