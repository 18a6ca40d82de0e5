//! `tqd` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error (the offending key path is
//! printed), 3 I/O or runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tqd_cli::{
    emit_report, eval_checkpoint, run_ablation, run_experiment, write_scene_files, AblationError,
    ExperimentError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "tqd",
    about = "Temporal query denoising for multi-object tracking: data generation, training, evaluation, ablations, reports"
)]
struct Cli {
    /// Config file (flat key=value lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override training.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; falls back to $TQD_OUT_DIR, then ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for ablation grids.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/eval scene files.
    GenData,
    /// Train a tracker and write checkpoint, training log, results, metrics.
    Train,
    /// Evaluate a saved checkpoint on the eval scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation grid and merge per-cell metrics into one CSV.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Aggregate metric CSVs into a Markdown table and an SVG plot.
    Report {
        /// Metric CSV files (e.g. ablation.csv or per-run metrics.csv).
        csvs: Vec<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

fn load_config(cli: &Cli) -> Result<RunConfig, (u8, String)> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| (EXIT_IO, format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| (EXIT_CONFIG, e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    cfg.validate().map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("TQD_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn experiment_exit(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::Config(_) => EXIT_CONFIG,
        _ => EXIT_IO,
    }
}

fn run(cli: &Cli) -> Result<(), (u8, String)> {
    let out = out_dir(cli);
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli)?;
            write_scene_files(&cfg, &out)
                .map_err(|e| (experiment_exit(&e), e.to_string()))?;
            println!(
                "wrote {} train and {} eval scenes under {}",
                cfg.training.scenes,
                cfg.eval.scenes,
                out.display()
            );
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let output = run_experiment(&cfg, "run", &out)
                .map_err(|e| (experiment_exit(&e), e.to_string()))?;
            println!("{}", tqd_core::metrics::METRICS_CSV_HEADER);
            println!("{}", output.csv_row);
        }
        Command::Eval { checkpoint } => {
            let cfg = load_config(cli)?;
            let output = eval_checkpoint(&cfg, checkpoint, "eval", &out)
                .map_err(|e| (experiment_exit(&e), e.to_string()))?;
            println!("{}", tqd_core::metrics::METRICS_CSV_HEADER);
            println!("{}", output.csv_row);
        }
        Command::Ablate { grid } => {
            let text = std::fs::read_to_string(grid)
                .map_err(|e| (EXIT_IO, format!("cannot read grid {}: {e}", grid.display())))?;
            let outcome = run_ablation(&text, &out, cli.threads).map_err(|e| match &e {
                AblationError::Grid(_) => (EXIT_CONFIG, e.to_string()),
                AblationError::Experiment(_, inner) => (experiment_exit(inner), e.to_string()),
                AblationError::Io(..) => (EXIT_IO, e.to_string()),
            })?;
            println!(
                "ablation complete: {} cells run, {} resumed, csv at {}",
                outcome.cells_run,
                outcome.cells_skipped,
                outcome.csv_path.display()
            );
        }
        Command::Report { csvs } => {
            if csvs.is_empty() {
                return Err((EXIT_CONFIG, "report needs at least one CSV path".into()));
            }
            let output = emit_report(csvs, &out).map_err(|e| match e {
                tqd_cli::ReportError::Schema { .. } => (EXIT_CONFIG, e.to_string()),
                tqd_cli::ReportError::Io(..) => (EXIT_IO, e.to_string()),
            })?;
            println!(
                "report written: {} and {}",
                output.markdown_path.display(),
                output.svg_path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
