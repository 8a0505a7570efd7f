//! `crnp`: train, evaluate and ablate cross-modal random network prediction
//! models, and run the randomized-prior demo.
//!
//! Exit codes: 0 success, 2 configuration error, 3 invariant violation,
//! 4 I/O error.

mod config;

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use crnp::data::Dataset;
use crnp::error::{CheckpointError, DataError};
use crnp::eval::{export_uncertainty, ood_separation, theory_demo};
use crnp::experiment::{ablation_grid, evaluate, prepare_data, run_training, write_ablation_csv, RunConfig};
use crnp::model::{load_checkpoint, save_checkpoint, CrnpModel};

const OUTPUT_ROOT_VAR: &str = "CRNP_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "crnp", version, about = "Cross-modal random network prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (or ensemble) and report test metrics.
    Train(RunArgs),
    /// Evaluate one or more checkpoints; several are logit-averaged.
    Eval(EvalArgs),
    /// Run the mode x fusion grid and write a CSV table.
    Ablate(RunArgs),
    /// Correlate RNP error with randomized-prior ensemble variance.
    Theory(RunArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML (or JSON) run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (default: `$CRNP_OUTPUT_ROOT/<name>` or `runs/<name>`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint files.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    /// Run configuration naming the dataset and split (default: the
    /// `config.json` next to the first checkpoint).
    #[command(flatten)]
    config: ConfigArgs,
    /// Also score an additive-noise OOD copy of the test split at this scale.
    #[arg(long, value_name = "SIGMA")]
    ood: Option<f64>,
    /// Write per-sample, per-modality cross-modal uncertainty to this CSV.
    #[arg(long, value_name = "PATH")]
    export_uncertainty: Option<PathBuf>,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

/// A failed command: message plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<crnp::Error> for Failure {
    fn from(e: crnp::Error) -> Self {
        use crnp::Error as E;
        let code = match &e {
            E::Config(_) | E::Usage(_) | E::Shape { .. } | E::Data(DataError::Spec(_)) => 2,
            E::Invariant(_) | E::Ledger { .. } | E::Checkpoint(CheckpointError::Corrupt(_)) => 3,
            E::Data(_) | E::Checkpoint(_) | E::Io { .. } => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> CmdResult<File> {
    File::create(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

/// Picks the output directory, records it in the config and creates it.
fn output_dir(cfg: &mut RunConfig, flag: Option<PathBuf>) -> CmdResult<PathBuf> {
    let dir = flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(&cfg.name)
    });
    fs::create_dir_all(&dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    cfg.output_dir = Some(dir.clone());
    Ok(dir)
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> CmdResult {
    let json = serde_json::to_string_pretty(cfg).expect("run config serializes");
    write_file(&dir.join("config.json"), json)
}

fn resolve(args: &ConfigArgs) -> CmdResult<RunConfig> {
    config::resolve(args.config.as_deref(), &args.overrides)
}

fn cmd_train(args: RunArgs) -> CmdResult {
    let mut cfg = resolve(&args.config)?;
    let dir = output_dir(&mut cfg, args.out)?;
    write_resolved(&cfg, &dir)?;
    let outcome = run_training(&cfg)?;
    for (i, (model, report)) in outcome.models.iter().zip(&outcome.reports).enumerate() {
        save_checkpoint(model, &dir.join(format!("model_{i}.crnp")))?;
        report.save_trace(&dir.join(format!("trace_{i}.csv")))?;
    }
    let json = outcome.metrics.to_json();
    write_file(&dir.join("metrics.json"), &json)?;
    println!("{json}");
    log::info!("artifacts written to {}", dir.display());
    Ok(())
}

fn eval_config(args: &EvalArgs) -> CmdResult<RunConfig> {
    if args.config.config.is_some() {
        return resolve(&args.config);
    }
    let beside = args.checkpoints[0].parent().unwrap_or(Path::new(".")).join("config.json");
    if !beside.exists() {
        return Err(Failure::config(format!(
            "no --config given and no {} next to the checkpoint",
            beside.display()
        )));
    }
    config::resolve(Some(&beside), &args.config.overrides)
}

fn test_split(cfg: &RunConfig) -> CmdResult<Dataset> {
    let data = cfg.load_dataset()?;
    Ok(prepare_data(cfg, &data)?.test)
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let cfg = eval_config(&args)?;
    let models = args
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<crnp::Result<Vec<CrnpModel>>>()?;
    let test = test_split(&cfg)?;
    let started = Instant::now();
    let cfg = RunConfig { ood_sigma: args.ood, ..cfg };
    let metrics = evaluate(&cfg, &models, &test, started)?;
    if let Some(path) = &args.export_uncertainty {
        let rows = export_uncertainty(&models[0], &test.modalities, create_file(path)?)?;
        log::info!("wrote {rows} uncertainty rows to {}", path.display());
        if let Some(sigma) = args.ood {
            let report = ood_separation(&models[0], &test.modalities, sigma, cfg.seed)?;
            report.save_csv(&path.with_extension("ood.csv"))?;
        }
    }
    let json = metrics.to_json();
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_ablate(args: RunArgs) -> CmdResult {
    let mut cfg = resolve(&args.config)?;
    let dir = output_dir(&mut cfg, args.out)?;
    write_resolved(&cfg, &dir)?;
    let rows = ablation_grid(&cfg)?;
    let path = dir.join("ablation.csv");
    write_ablation_csv(&rows, create_file(&path)?)?;
    write_ablation_csv(&rows, std::io::stdout().lock())?;
    log::info!("ablation table written to {}", path.display());
    Ok(())
}

fn cmd_theory(args: RunArgs) -> CmdResult {
    let mut cfg = resolve(&args.config)?;
    let dir = output_dir(&mut cfg, args.out)?;
    write_resolved(&cfg, &dir)?;
    let report = theory_demo(&cfg.theory)?;
    report.write_csv(create_file(&dir.join("theory.csv"))?)?;
    let summary = serde_json::json!({
        "spearman": report.correlation,
        "k": cfg.theory.k,
        "seed": cfg.theory.seed,
    });
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join("theory.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Theory(a) => cmd_theory(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
