//! `ffdyn` command-line driver.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 missing or unreadable data,
//! 3 invalid configuration, 4 numeric divergence, 5 malformed metrics CSV.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use ffdyn::analysis::{
    aggregate_curves, config_keys, delay_curves, export_plot_data, layer_model_correlation,
    per_run_delays, AnalysisError, PlotData, DEFAULT_TARGET,
};
use ffdyn::data::{load_mnist, DataError, DatasetSplit};
use ffdyn::experiment::{
    metrics_to_rows, read_metrics_csv, run_experiment_with, run_sweep_with, write_metrics_csv,
    ExperimentConfig, ExperimentError, RunReport, SweepPlan, METRICS_FILE,
};

const EXIT_FAILURE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_CSV: u8 = 5;

#[derive(Parser)]
#[command(name = "ffdyn", version, about = "Forward-Forward training dynamics: train, sweep, analyze")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its metrics CSV.
    Train(TrainArgs),
    /// Run a plan of configurations and write one combined metrics CSV.
    Sweep(SweepArgs),
    /// Compute curves, delays and correlations from a metrics CSV and print a summary.
    Analyze(AnalyzeArgs),
    /// Write per-figure CSVs and SVG charts from a metrics CSV.
    Export(AnalyzeArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = "FFDYN_DATA_DIR", default_value = "data/mnist")]
    data_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.csv and the resolved config.
    #[arg(long, default_value = "out/train")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// `paper-full`, `desk-small`, or a plan file.
    #[arg(long, default_value = "desk-small")]
    plan: String,
    /// Maximum concurrent runs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// List the runs without training.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, default_value = "out/sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Metrics CSV written by train or sweep.
    #[arg(long = "in", value_name = "CSV")]
    input: PathBuf,
    /// Target accuracy for the delay metric.
    #[arg(long, default_value_t = DEFAULT_TARGET)]
    target: f64,
    /// Also write per-run delays.
    #[arg(long)]
    per_run: bool,
    /// Output directory; defaults to the CSV's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        let code = match &e {
            ExperimentError::InvalidConfig { .. }
            | ExperimentError::UnknownKey(_)
            | ExperimentError::ConfigParse(_)
            | ExperimentError::UnknownPlan(_)
            | ExperimentError::EmptyPlan
            | ExperimentError::DuplicateRunId(_) => EXIT_CONFIG,
            ExperimentError::Diverged(_) => EXIT_DIVERGED,
            ExperimentError::Data(_) => EXIT_DATA,
            ExperimentError::MalformedCsv { .. } => EXIT_CSV,
            _ => EXIT_FAILURE,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        let code = match &e {
            AnalysisError::TargetOutOfRange(_) => EXIT_CONFIG,
            AnalysisError::Io { .. } => EXIT_FAILURE,
            // Structural problems in the rows mean the CSV is not usable.
            _ => EXIT_CSV,
        };
        CliError::new(code, e.to_string())
    }
}

fn load_data(dir: &Path) -> Result<(DatasetSplit, DatasetSplit), CliError> {
    let (train, test) = load_mnist(dir).map_err(|e: DataError| {
        CliError::new(
            EXIT_DATA,
            format!("cannot load MNIST from {}: {e}", dir.display()),
        )
    })?;
    log::info!("loaded {} training and {} test images", train.len(), test.len());
    Ok((train, test))
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| {
            CliError::new(EXIT_CONFIG, format!("override `{o}` is not KEY=VALUE"))
        })?;
        cfg.set_override(k.trim(), v)?;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(l) = args.layers {
        cfg.num_layers = l;
    }
    if let Some(h) = args.hidden_dim {
        cfg.hidden_dim = h;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (train, test) = load_data(&args.common.data_dir)?;
    create_dir(&args.out)?;

    println!(
        "run {}: {} layers x {} units, {} epochs",
        cfg.run_id(),
        cfg.num_layers,
        cfg.hidden_dim,
        cfg.epochs
    );
    let metrics = run_experiment_with(&cfg, &train, &test, |m| {
        let layers: Vec<String> = m.per_layer_accuracy.iter().map(|a| format!("{a:.4}")).collect();
        println!(
            "epoch {:>3}/{}  layer_accuracy [{}]  overall_accuracy {:.4}  ({:.1}s)",
            m.epoch,
            cfg.epochs,
            layers.join(" "),
            m.overall_accuracy,
            m.wall_time
        );
    })?;

    let csv = args.out.join(METRICS_FILE);
    write_metrics_csv(&csv, &metrics_to_rows(&metrics))?;
    let cfg_path = args.out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string())
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", cfg_path.display())))?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let base = resolve_config(&args.common)?;
    let plan = SweepPlan::resolve(&args.plan, &base, args.out.clone())?;
    for c in &plan.configs {
        c.validate()?;
    }
    if args.parallel == 0 {
        return Err(CliError::new(EXIT_CONFIG, "--parallel must be >= 1"));
    }
    let total = plan.configs.len();
    if args.dry_run {
        for c in &plan.configs {
            println!("{}", c.run_id());
        }
        println!("{total} runs, output {}", plan.metrics_path().display());
        return Ok(());
    }
    let (train, test) = load_data(&args.common.data_dir)?;

    let done = AtomicUsize::new(0);
    let progress = |r: &RunReport| {
        let n = done.fetch_add(1, Ordering::SeqCst) + 1;
        match &r.result {
            Ok(acc) => println!(
                "[{n}/{total}] {}  overall_accuracy {acc:.4}  ({:.1}s)",
                r.run_id, r.wall_time
            ),
            Err(e) => println!("[{n}/{total}] {}  FAILED: {e}", r.run_id),
        }
    };
    let outcome = run_sweep_with(&plan, &train, &test, args.parallel, &progress)?;
    println!(
        "{} of {total} runs completed; wrote {}",
        outcome.completed.len(),
        outcome.metrics_path.display()
    );
    if !outcome.failures.is_empty() {
        eprintln!(
            "warning: {} runs failed (listed in {}):",
            outcome.failures.len(),
            plan.failures_path().display()
        );
        for (id, e) in &outcome.failures {
            eprintln!("  {id}: {e}");
        }
    }
    if outcome.completed.is_empty() {
        return Err(CliError::new(EXIT_DIVERGED, "every run failed"));
    }
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs, summary: bool) -> Result<(), CliError> {
    if !(args.target > 0.0 && args.target < 1.0) {
        return Err(AnalysisError::TargetOutOfRange(args.target).into());
    }
    let rows = read_metrics_csv(&args.input).map_err(|e| match e {
        ExperimentError::Io { .. } => CliError::new(EXIT_CSV, e.to_string()),
        other => other.into(),
    })?;
    let curves = aggregate_curves(&rows)?;
    let delays = delay_curves(&curves, args.target)?;
    let run_delays = if args.per_run {
        per_run_delays(&rows, args.target)?
    } else {
        Vec::new()
    };
    // An undefined correlation for one config is reported and skipped, not zeroed.
    let mut correlations = Vec::new();
    for key in config_keys(&rows) {
        match layer_model_correlation(&rows, key) {
            Ok(c) => correlations.extend(c),
            Err(e) => eprintln!("warning: {key}: correlation skipped: {e}"),
        }
    }
    let out = args.out.clone().unwrap_or_else(|| {
        args.input
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    let data = PlotData {
        curves: &curves,
        delays: &delays,
        run_delays: &run_delays,
        correlations: &correlations,
    };
    // analyze writes the tidy tables; export adds the charts.
    let files = export_plot_data(&data, &out, !summary)?;

    if summary {
        println!("delay to accuracy {}:", args.target);
        for d in &delays {
            let v: Vec<String> = d.delays.iter().map(|x| x.to_string()).collect();
            println!("  {}  [{}]", d.key, v.join(" "));
        }
        println!("layer vs overall accuracy (pearson / spearman, n pairs):");
        for c in &correlations {
            println!(
                "  {} layer {:>2}  {:+.3} / {:+.3}  n={}{}",
                c.key,
                c.layer_index,
                c.pearson,
                c.spearman,
                c.n_pairs,
                if c.strong_pearson() || c.strong_spearman() {
                    "  strong"
                } else {
                    ""
                }
            );
        }
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("FFDYN_LOG")
        .init();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Analyze(a) => cmd_analyze(a, true),
        Command::Export(a) => cmd_analyze(a, false),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
