//! `glcn`: command-line driver for the lesion classification pipeline.
//!
//! Every command works inside one work directory. Errors are printed to
//! stderr as a single JSON line; exit code 1 means a configuration or usage
//! problem, 2 a missing artifact, 3 any other failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glcn_core::config::ExperimentConfig;
use glcn_core::gradsuite::{run_suite, GRAD_TOLERANCE};
use glcn_core::maps::MapSelection;
use glcn_core::pipeline::{
    ablate, curve, evaluate, gen_data, replay_evaluation, report_table, train_agg, train_context, train_local,
    TrainingLog, Workdir,
};
use glcn_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "glcn", version, about = "Lesion classification from local patches and global context")]
struct Cli {
    /// Work directory holding config, data, models and results.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// Experiment config; defaults to <workdir>/config.json.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and store the config in the work directory.
    GenData {
        /// Replace an existing dataset.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the whole-image context network.
    TrainContext,
    /// Train the patch classifier.
    TrainLocal,
    /// Train aggregation networks on frozen upstream networks.
    TrainAgg(AggArgs),
    /// Evaluate aggregation checkpoints on the test split.
    Evaluate {
        #[command(flatten)]
        agg: AggArgs,
        /// Re-run the evaluation recorded in an evaluate run manifest.
        #[arg(long, conflicts_with_all = ["combo", "seeds"])]
        replay: Option<PathBuf>,
    },
    /// Evaluate every configured map combination and seed into one table.
    Ablate,
    /// Write the TNR-FNR curve for one evaluated checkpoint.
    Curve {
        #[arg(long, default_value = "embedding+saliency")]
        combo: MapSelection,
        /// Aggregation seed; defaults to the first configured seed.
        #[arg(long)]
        agg_seed: Option<u64>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, clap::Args)]
struct AggArgs {
    /// Map combinations, e.g. `embedding+saliency`; defaults to the configured list.
    #[arg(long, value_delimiter = ',')]
    combo: Vec<MapSelection>,
    /// Aggregation seeds; defaults to the configured list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

impl AggArgs {
    fn pairs(&self, cfg: &ExperimentConfig) -> Result<(Vec<MapSelection>, Vec<u64>)> {
        let sels = if self.combo.is_empty() { cfg.eval.selections()? } else { self.combo.clone() };
        let seeds = if self.seeds.is_empty() { cfg.eval.seeds.clone() } else { self.seeds.clone() };
        Ok((sels, seeds))
    }
}

fn load_config(cli: &Cli, wd: &Workdir, fresh: bool) -> Result<ExperimentConfig> {
    let path = cli.config.clone().unwrap_or_else(|| wd.config());
    let mut cfg = if fresh && cli.config.is_none() && !path.exists() {
        ExperimentConfig::default()
    } else {
        ExperimentConfig::load(&path)?
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_log(name: &str, log: &TrainingLog) {
    let r = &log.report;
    let auc = r.best_val_auc.map_or("-".into(), |a| format!("{a:.4}"));
    println!(
        "{name}: best val AUC {auc} at epoch {} of {} ({:?})",
        r.best_epoch,
        r.epochs.len(),
        r.stop_reason
    );
}

fn run(cli: &Cli) -> Result<()> {
    let wd = Workdir::new(&cli.workdir);
    match &cli.command {
        Command::GenData { overwrite } => {
            let cfg = load_config(cli, &wd, true)?;
            let m = gen_data(&cfg, &wd, *overwrite)?;
            for (name, c) in [("train", &m.counts.train), ("val", &m.counts.val), ("test", &m.counts.test)] {
                println!(
                    "{name}: {} patients, {} images, {} lesions ({} malignant, {} benign, {} ambiguous)",
                    c.patients, c.images, c.lesions, c.malignant, c.benign, c.ambiguous
                );
            }
        }
        Command::TrainContext => print_log("context", &train_context(&load_config(cli, &wd, false)?, &wd)?),
        Command::TrainLocal => print_log("local", &train_local(&load_config(cli, &wd, false)?, &wd)?),
        Command::TrainAgg(args) => {
            let cfg = load_config(cli, &wd, false)?;
            let (sels, seeds) = args.pairs(&cfg)?;
            let logs = train_agg(&cfg, &wd, &sels, &seeds)?;
            let names = sels.iter().flat_map(|s| seeds.iter().map(move |k| format!("{s} seed {k}")));
            for (name, log) in names.zip(&logs) {
                print_log(&name, log);
            }
        }
        Command::Evaluate { agg, replay } => {
            let reports = match replay {
                Some(manifest) => vec![replay_evaluation(&wd, manifest)?],
                None => {
                    let cfg = load_config(cli, &wd, false)?;
                    let (sels, seeds) = agg.pairs(&cfg)?;
                    let pairs: Vec<_> = sels.iter().flat_map(|&s| seeds.iter().map(move |&k| (s, k))).collect();
                    evaluate(&cfg, &wd, &pairs)?
                }
            };
            for r in &reports {
                println!("{}", report_table(r));
            }
        }
        Command::Ablate => print!("{}", ablate(&load_config(cli, &wd, false)?, &wd)?.to_text()),
        Command::Curve { combo, agg_seed } => {
            let cfg = load_config(cli, &wd, false)?;
            let k = agg_seed.unwrap_or(cfg.eval.seeds[0]);
            let points = curve(&cfg, &wd, *combo, k)?;
            println!("{} points written to {}", points.len(), wd.curve_file(*combo, k).display());
        }
        Command::Gradcheck => {
            let cases = run_suite()?;
            let mut failed = Vec::new();
            for c in &cases {
                let status = if c.passes() { "ok" } else { "FAIL" };
                println!("{:<28} max rel error {:.2e}  {status}", c.name, c.report.max_rel_error);
                if !c.passes() {
                    failed.push(c.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "gradient check above {GRAD_TOLERANCE:e}: {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Tensor(_) => "tensor",
        Error::Checkpoint(_) => "checkpoint",
        Error::Config(_) => "config",
        Error::MissingArtifact(_) => "missing_artifact",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::SamplingExhausted(_) => "sampling_exhausted",
        Error::Placement(_) => "placement",
        Error::Training(_) => "training",
        Error::InvalidInput(_) => "invalid_input",
        Error::SearchFailed { .. } => "search_failed",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::MissingArtifact(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut line = serde_json::json!({ "error": kind(&e), "message": e.to_string() });
            if let Error::MissingArtifact(p) = &e {
                line["path"] = p.display().to_string().into();
            }
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
