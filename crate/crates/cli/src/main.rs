//! Batch front end for the coil failure-prediction pipeline.
//!
//! Configuration comes from an optional TOML file plus flag overrides;
//! flags always win. Logs go to stderr, machine-readable output to files.
//! Exit codes: 0 success, 1 runtime/data failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use coilqa_core::data::{
    generate_synthetic, load_channel_table, load_ncm_records, save_channel_table,
    save_ncm_records, Dataset, Label, NcmSample, SyntheticSpec, NUM_CHANNELS,
};
use coilqa_core::ensemble::{run_pipeline, EvalReport, PipelineConfig};
use coilqa_core::models::{build_cnn_with_dropout, build_fcn, train, CnnVariant};
use coilqa_core::preprocess::{balance_to_ratio, Normalizer};
use coilqa_core::report::{render_scores_csv, render_text};
use coilqa_core::tensor::Tensor;
use coilqa_core::{derive_seed, Error};

#[derive(Parser)]
#[command(name = "coilqa", version, about = "MRI coil failure-prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (channel table + NCM table)
    Generate(GenerateArgs),
    /// Rebalance an NCM table by permutation augmentation
    Augment(AugmentArgs),
    /// Train the base models once on a fixed train/tune split
    TrainBase(TrainBaseArgs),
    /// Run the full cross-validated evaluation pipeline
    Evaluate(EvaluateArgs),
    /// Re-render report files from a machine-readable report
    Report(ReportArgs),
}

/// File-backed configuration; every field has a default so a config file
/// can specify any subset. The full resolved config is echoed into the
/// evaluation report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    synthetic: SyntheticSpec,
    pipeline: PipelineConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<RunConfig, AppError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| AppError::runtime(format!("read {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| AppError::usage(format!("config {}: {e}", p.display())))
            }
        }
    }
}

#[derive(Args)]
struct CommonConfig {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides both generator and pipeline seeds)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Output directory for channel.csv and ncm.csv
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    coils: Option<usize>,
    #[arg(long)]
    broken_fraction: Option<f64>,
    #[arg(long)]
    channel_measurements: Option<usize>,
    #[arg(long)]
    ncm_measurements: Option<usize>,
}

#[derive(Args)]
struct AugmentArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Input NCM table
    #[arg(long)]
    input: PathBuf,
    /// Output NCM table
    #[arg(long)]
    output: PathBuf,
    /// Minimum broken/(broken+normal) ratio after augmentation
    #[arg(long, default_value_t = 0.2)]
    target_ratio: f64,
}

#[derive(Args)]
struct TrainBaseArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[command(flatten)]
    data: DataSource,
    /// Directory for the trained model files
    #[arg(long)]
    out_dir: PathBuf,
    /// CNN variant to train: cnn1..cnn4, or "all"
    #[arg(long, default_value = "cnn2")]
    cnn_variant: String,
    /// Skip augmentation of the CNN training set
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[command(flatten)]
    data: DataSource,
    /// Directory for report.json, report.txt and scores.csv
    #[arg(long)]
    out_dir: PathBuf,
    /// CNN variant(s): cnn1..cnn4, or "all"
    #[arg(long)]
    cnn_variant: Option<String>,
    /// Disable NCM augmentation
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    k_folds: Option<usize>,
    #[arg(long)]
    target_ratio: Option<f64>,
    /// Fold-level parallelism (1 = sequential)
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    coils: Option<usize>,
    #[arg(long)]
    broken_fraction: Option<f64>,
}

#[derive(Args)]
struct DataSource {
    /// Channel feature table (CSV); omit to generate synthetic data
    #[arg(long, requires = "ncm")]
    channel: Option<PathBuf>,
    /// NCM table (CSV); omit to generate synthetic data
    #[arg(long, requires = "channel")]
    ncm: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Machine-readable report produced by `evaluate`
    #[arg(long)]
    input: PathBuf,
    /// Directory for report.txt and scores.csv; stdout when omitted
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

struct AppError {
    code: u8,
    msg: String,
}

impl AppError {
    fn usage(msg: impl Into<String>) -> AppError {
        AppError {
            code: 2,
            msg: msg.into(),
        }
    }
    fn runtime(msg: impl Into<String>) -> AppError {
        AppError {
            code: 1,
            msg: msg.into(),
        }
    }
}

impl From<Error> for AppError {
    fn from(e: Error) -> AppError {
        AppError::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Augment(a) => cmd_augment(a),
        Command::TrainBase(a) => cmd_train_base(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn parse_variants(s: &str) -> Result<Vec<CnnVariant>, AppError> {
    if s == "all" {
        return Ok(CnnVariant::all().to_vec());
    }
    s.split(',')
        .map(|v| CnnVariant::parse(v.trim()).map_err(|e| AppError::usage(e.to_string())))
        .collect()
}

/// Pre-flight validation failures are usage errors (exit 2); anything that
/// goes wrong after that point is a runtime failure (exit 1).
fn validate_as_usage(r: coilqa_core::Result<()>) -> Result<(), AppError> {
    r.map_err(|e| AppError::usage(e.to_string()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), AppError> {
    std::fs::write(path, contents)
        .map_err(|e| AppError::runtime(format!("write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| AppError::runtime(format!("create {}: {e}", dir.display())))
}

fn cmd_generate(args: GenerateArgs) -> Result<(), AppError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    if let Some(v) = args.coils {
        cfg.synthetic.coils = v;
    }
    if let Some(v) = args.broken_fraction {
        cfg.synthetic.broken_fraction = v;
    }
    if let Some(v) = args.channel_measurements {
        cfg.synthetic.channel_measurements_per_coil = v;
    }
    if let Some(v) = args.ncm_measurements {
        cfg.synthetic.ncm_measurements_per_coil = v;
    }
    if let Some(v) = args.common.seed {
        cfg.synthetic.seed = v;
    }
    validate_as_usage(cfg.synthetic.validate())?;

    let ds = generate_synthetic(&cfg.synthetic)?;
    ensure_dir(&args.out_dir)?;
    let channel_path = args.out_dir.join("channel.csv");
    let ncm_path = args.out_dir.join("ncm.csv");
    save_channel_table(&channel_path, &ds.channel)?;
    save_ncm_records(&ncm_path, &ds.ncm)?;
    let broken = ds
        .coil_labels()
        .values()
        .filter(|&&l| l == Label::Broken)
        .count();
    eprintln!(
        "generated {} coils ({} broken), {} channel rows -> {}, {} matrices -> {}",
        cfg.synthetic.coils,
        broken,
        ds.channel.len(),
        channel_path.display(),
        ds.ncm.len(),
        ncm_path.display()
    );
    Ok(())
}

fn broken_ratio(samples: &[NcmSample]) -> f64 {
    let broken = samples.iter().filter(|s| s.label == Label::Broken).count();
    broken as f64 / samples.len() as f64
}

fn cmd_augment(args: AugmentArgs) -> Result<(), AppError> {
    if !(args.target_ratio > 0.0 && args.target_ratio < 1.0) {
        return Err(AppError::usage(format!(
            "--target-ratio {} outside (0,1)",
            args.target_ratio
        )));
    }
    let cfg = RunConfig::load(args.common.config.as_deref())?;
    let seed = args.common.seed.unwrap_or(cfg.pipeline.seed);
    let samples = load_ncm_records(&args.input)?;
    if samples.is_empty() {
        return Err(AppError::runtime("input NCM table is empty"));
    }
    let before = broken_ratio(&samples);
    let mut rng = rand_seed(derive_seed(seed, "cli-augment", 0));
    let balanced = balance_to_ratio(&samples, args.target_ratio, &mut rng)?;
    for s in &balanced[samples.len()..] {
        s.validate()?;
    }
    save_ncm_records(&args.output, &balanced)?;
    eprintln!(
        "broken ratio {:.4} -> {:.4} ({} samples -> {}), wrote {}",
        before,
        broken_ratio(&balanced),
        samples.len(),
        balanced.len(),
        args.output.display()
    );
    Ok(())
}

fn rand_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn load_or_generate(data: &DataSource, spec: &SyntheticSpec) -> Result<Dataset, AppError> {
    match (&data.channel, &data.ncm) {
        (Some(c), Some(n)) => {
            let channel = load_channel_table(c)?;
            let ncm = load_ncm_records(n)?;
            Ok(Dataset::from_parts(channel, ncm)?)
        }
        _ => {
            eprintln!(
                "no input files given; generating {} synthetic coils (seed {})",
                spec.coils, spec.seed
            );
            Ok(generate_synthetic(spec)?)
        }
    }
}

/// Stratified 70/30 coil split for one-shot base-model training.
fn train_tune_split(
    ds: &Dataset,
    seed: u64,
) -> (std::collections::BTreeSet<String>, std::collections::BTreeSet<String>) {
    use rand::Rng;
    let mut rng = rand_seed(derive_seed(seed, "train-base-split", 0));
    let mut train = std::collections::BTreeSet::new();
    let mut tune = std::collections::BTreeSet::new();
    for target in [Label::Broken, Label::Normal] {
        let mut coils: Vec<&String> = ds
            .coil_labels()
            .iter()
            .filter(|(_, &l)| l == target)
            .map(|(c, _)| c)
            .collect();
        for i in (1..coils.len()).rev() {
            let j = rng.gen_range(0..=i);
            coils.swap(i, j);
        }
        let n_tune = (coils.len() as f64 * 0.3).round() as usize;
        for (i, c) in coils.into_iter().enumerate() {
            if i < n_tune {
                tune.insert(c.clone());
            } else {
                train.insert(c.clone());
            }
        }
    }
    (train, tune)
}

fn cmd_train_base(args: TrainBaseArgs) -> Result<(), AppError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    if let Some(v) = args.common.seed {
        cfg.synthetic.seed = v;
        cfg.pipeline.seed = v;
    }
    let variants = parse_variants(&args.cnn_variant)?;
    validate_as_usage(cfg.pipeline.validate())?;
    validate_as_usage(cfg.synthetic.validate())?;

    let ds = load_or_generate(&args.data, &cfg.synthetic)?;
    let (train_coils, tune_coils) = train_tune_split(&ds, cfg.pipeline.seed);
    ensure_dir(&args.out_dir)?;

    // FCN on normalized channel rows
    let train_rows: Vec<&coilqa_core::data::ChannelSample> = ds
        .channel
        .iter()
        .filter(|s| train_coils.contains(&s.coil_id))
        .collect();
    let feature_rows: Vec<&[f64]> = train_rows.iter().map(|s| s.features.as_slice()).collect();
    let normalizer = Normalizer::fit(&feature_rows)?;
    let tensor_of = |coils: &std::collections::BTreeSet<String>| {
        let mut data = Vec::new();
        let mut y = Vec::new();
        for s in ds.channel.iter().filter(|s| coils.contains(&s.coil_id)) {
            data.extend(normalizer.transform(&s.features));
            y.push(s.label.class_index());
        }
        let n = y.len();
        (Tensor::new(vec![n, 4], data).unwrap(), y)
    };
    let (tx, ty) = tensor_of(&train_coils);
    let (vx, vy) = tensor_of(&tune_coils);
    let spec = build_fcn(cfg.pipeline.fcn_hidden, cfg.pipeline.fcn_dropout)?;
    let mut fcn_cfg = cfg.pipeline.fcn_train;
    fcn_cfg.seed = derive_seed(cfg.pipeline.seed, "train-base-fcn", 0);
    let mut fcn = train(spec, &tx, &ty, &vx, &vy, fcn_cfg)?;
    fcn.normalizer = Some(normalizer);
    let fcn_path = args.out_dir.join("fcn.json");
    fcn.save(&fcn_path)?;
    let best_f = fcn.history.iter().map(|e| e.tune_f).fold(0.0f64, f64::max);
    eprintln!(
        "fcn: {} epochs, best tune F {:.4} -> {}",
        fcn.history.len(),
        best_f,
        fcn_path.display()
    );

    // CNNs on (optionally augmented) NCMs
    let ncm_of = |coils: &std::collections::BTreeSet<String>| -> Vec<NcmSample> {
        ds.ncm
            .iter()
            .filter(|s| coils.contains(&s.coil_id))
            .cloned()
            .collect()
    };
    let mut cnn_train_set = ncm_of(&train_coils);
    let mut cnn_tune_set = ncm_of(&tune_coils);
    if !args.no_augment {
        let mut rng = rand_seed(derive_seed(cfg.pipeline.seed, "train-base-aug", 0));
        cnn_train_set = balance_to_ratio(&cnn_train_set, cfg.pipeline.target_ratio, &mut rng)?;
        cnn_tune_set = balance_to_ratio(&cnn_tune_set, cfg.pipeline.target_ratio, &mut rng)?;
    }
    let ncm_tensor = |set: &[NcmSample]| {
        let mut data = Vec::new();
        let mut y = Vec::new();
        for s in set {
            data.extend_from_slice(&s.matrix);
            y.push(s.label.class_index());
        }
        let n = y.len();
        (
            Tensor::new(vec![n, 1, NUM_CHANNELS, NUM_CHANNELS], data).unwrap(),
            y,
        )
    };
    let (cx, cy) = ncm_tensor(&cnn_train_set);
    let (cvx, cvy) = ncm_tensor(&cnn_tune_set);
    for (i, variant) in variants.iter().enumerate() {
        let spec = build_cnn_with_dropout(*variant, cfg.pipeline.cnn_dropout);
        let mut cnn_cfg = cfg.pipeline.cnn_train;
        cnn_cfg.seed = derive_seed(cfg.pipeline.seed, "train-base-cnn", i as u64);
        let model = train(spec, &cx, &cy, &cvx, &cvy, cnn_cfg)?;
        let path = args.out_dir.join(format!("{}.json", variant.name()));
        model.save(&path)?;
        let best_f = model
            .history
            .iter()
            .map(|e| e.tune_f)
            .fold(0.0f64, f64::max);
        eprintln!(
            "{}: {} epochs, best tune F {:.4} -> {}",
            variant.name(),
            model.history.len(),
            best_f,
            path.display()
        );
    }
    Ok(())
}

/// Everything `evaluate` writes to report.json: the resolved configuration
/// (including defaulted fields) plus the pipeline output.
#[derive(Serialize, Deserialize)]
struct ReportFile {
    run_config: RunConfig,
    report: EvalReport,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), AppError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    if let Some(v) = args.common.seed {
        cfg.synthetic.seed = v;
        cfg.pipeline.seed = v;
    }
    if let Some(v) = args.coils {
        cfg.synthetic.coils = v;
    }
    if let Some(v) = args.broken_fraction {
        cfg.synthetic.broken_fraction = v;
    }
    if let Some(v) = args.k_folds {
        cfg.pipeline.k_folds = v;
    }
    if let Some(v) = args.target_ratio {
        cfg.pipeline.target_ratio = v;
    }
    if let Some(v) = args.jobs {
        cfg.pipeline.jobs = v;
    }
    if let Some(s) = &args.cnn_variant {
        cfg.pipeline.cnn_variants = parse_variants(s)?;
    }
    if args.no_augment {
        cfg.pipeline.augment = false;
    }
    validate_as_usage(cfg.pipeline.validate())?;
    validate_as_usage(cfg.synthetic.validate())?;

    let ds = load_or_generate(&args.data, &cfg.synthetic)?;
    eprintln!(
        "evaluating {} coils, k={} folds, seed {}",
        ds.coil_labels().len(),
        cfg.pipeline.k_folds,
        cfg.pipeline.seed
    );
    let report = run_pipeline(&ds, &cfg.pipeline)?;
    ensure_dir(&args.out_dir)?;
    let file = ReportFile {
        run_config: cfg,
        report,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| AppError::runtime(format!("serialize report: {e}")))?;
    write_file(&args.out_dir.join("report.json"), &json)?;
    write_file(&args.out_dir.join("report.txt"), &render_text(&file.report))?;
    write_file(
        &args.out_dir.join("scores.csv"),
        &render_scores_csv(&file.report),
    )?;
    eprintln!("wrote report.json, report.txt, scores.csv to {}", args.out_dir.display());
    for s in &file.report.stages {
        eprintln!("  {:>20}  F {:.4}", s.stage, s.averaged.f_score);
    }
    if file.report.any_fold_failed() {
        return Err(AppError::runtime("one or more folds failed"));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), AppError> {
    let json = std::fs::read_to_string(&args.input)
        .map_err(|e| AppError::runtime(format!("read {}: {e}", args.input.display())))?;
    let file: ReportFile = serde_json::from_str(&json)
        .map_err(|e| AppError::usage(format!("{}: {e}", args.input.display())))?;
    let text = render_text(&file.report);
    let csv = render_scores_csv(&file.report);
    match args.out_dir {
        Some(dir) => {
            ensure_dir(&dir)?;
            write_file(&dir.join("report.txt"), &text)?;
            write_file(&dir.join("scores.csv"), &csv)?;
            eprintln!("wrote report.txt and scores.csv to {}", dir.display());
        }
        None => {
            // tolerate downstream pipes closing early (e.g. `| head`)
            use std::io::Write;
            let stdout = std::io::stdout();
            let mut h = stdout.lock();
            let _ = h.write_all(text.as_bytes());
            let _ = h.write_all(csv.as_bytes());
        }
    }
    Ok(())
}
