//! `adaptstress`: generate a synthetic wearable cohort, clean it, train the
//! personalized stress forecaster, evaluate it against baselines with
//! selective test-time adaptation, sweep window sizes, attribute forecasts
//! to features, and reshape results into plot-ready tables.
//!
//! All commands are driven by one flat JSON config (`--config`); flags
//! override file values and every override is echoed into the run manifest.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig, TtaMode};

#[derive(Parser)]
#[command(
    name = "adaptstress",
    version,
    about = "Personalized stress forecasting pipeline",
    propagate_version = true
)]
struct Cli {
    /// JSON config file; omitted keys fall back to reference defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed; every stage derives named sub-seeds from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Requested fold-level parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Input window length in days.
    #[arg(long, global = true)]
    w_in: Option<usize>,

    /// Forecast horizon in days.
    #[arg(long, global = true)]
    w_out: Option<usize>,

    /// Directory of per-participant cohort CSVs.
    #[arg(long, global = true, value_name = "DIR")]
    cohort_dir: Option<PathBuf>,

    /// Directory result files are written into.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Report the unadapted model as primary; adaptation is still measured.
    #[arg(long, global = true, conflicts_with = "force_tta")]
    no_tta: bool,

    /// Report the always-adapted model as primary, bypassing the cascade.
    #[arg(long, global = true)]
    force_tta: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known couplings and injected defects.
    Generate,
    /// Clean the raw cohort and write the cleaned copy plus a quality report.
    Preprocess,
    /// Run cohort-wide ensemble feature selection.
    SelectFeatures,
    /// Train the first cross-validation fold and checkpoint its best model.
    Train,
    /// Evaluate every model variant with leave-one-participant-out folds.
    Evaluate,
    /// Evaluate across the full window-size grid.
    Sweep,
    /// Attribute each fold's forecasts to input features.
    Explain,
    /// Reshape finished evaluation outputs into a per-participant table.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Preprocess => "preprocess",
            Command::SelectFeatures => "select-features",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::Explain => "explain",
            Command::Report => "report",
        }
    }
}

fn run(cli: Cli) -> adaptstress::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut ov = Overrides::new();
    ov.set(&mut cfg.seed, "seed", cli.seed);
    ov.set(&mut cfg.jobs, "jobs", cli.jobs);
    ov.set(&mut cfg.w_in, "w_in", cli.w_in);
    ov.set(&mut cfg.w_out, "w_out", cli.w_out);
    ov.set_path(&mut cfg.cohort_dir, "cohort_dir", cli.cohort_dir);
    ov.set_path(&mut cfg.output_dir, "output_dir", cli.output_dir);
    if cli.no_tta {
        ov.set(&mut cfg.tta_mode, "tta_mode", Some(TtaMode::Off));
    }
    if cli.force_tta {
        ov.set(&mut cfg.tta_mode, "tta_mode", Some(TtaMode::Forced));
    }
    if cfg.jobs > 1 {
        log::info!(
            "jobs={} requested; folds run sequentially so the adaptation \
             history stays ordered",
            cfg.jobs
        );
    }
    log::info!("{} (seed {})", cli.command.name(), cfg.seed);

    let overrides = ov.applied;
    match cli.command {
        Command::Generate => commands::generate(&cfg, overrides),
        Command::Preprocess => commands::preprocess(&cfg, overrides),
        Command::SelectFeatures => commands::select_features(&cfg, overrides),
        Command::Train => commands::train(&cfg, overrides),
        Command::Evaluate => commands::evaluate(&cfg, overrides),
        Command::Sweep => commands::sweep(&cfg, overrides),
        Command::Explain => commands::explain(&cfg, overrides),
        Command::Report => commands::report(&cfg, overrides),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let record = serde_json::json!({ "error": e.to_string(), "kind": e.kind() });
        eprintln!("{record}");
        std::process::exit(1);
    }
}
