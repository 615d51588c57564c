use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fcam_cli::commands::{self, EvalMethod};
use fcam_cli::run::standalone_config;
use fcam_cli::{plot, CliResult, RunDir};
use fcam_core::datasets::Split;
use serde::Serialize;

/// Full-resolution CAMs: train, infer and evaluate weakly supervised localizers.
///
/// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
/// usage, 3 missing checkpoint, 4 dataset not found. Failures are reported on
/// stderr as one JSON object.
#[derive(Parser)]
#[command(name = "fcam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file. Defaults to the run's config.toml, else the desk-scale preset.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory holding config, checkpoints, logs and reports.
    #[arg(long, short, default_value = "run")]
    run: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the synthetic colored-shape dataset.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output root; defaults to `dataset.root`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Shortcut for `--set dataset.synthetic.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: train the classifier.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stage 2: freeze the classifier and train the decoder.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Search the n_minus and alpha grids and keep the best validation point.
        #[arg(long)]
        grid: bool,
    },
    /// Build localization maps for images and store them as rasters.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        /// Images (.fcr, .png or .jpg).
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value = "maps")]
        out: PathBuf,
        /// fcam, gap_cam, grad_cam or center_baseline.
        #[arg(long, default_value = "fcam")]
        method: EvalMethod,
        /// Class whose map is built; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Score localization maps with the full WSOL metric suite.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', default_value = "fcam,gap_cam")]
        methods: Vec<EvalMethod>,
        /// train, val or test; defaults to `eval.split`.
        #[arg(long)]
        split: Option<Split>,
        /// Score maps stored by a previous `eval` instead of recomputing them.
        #[arg(long)]
        cams: Option<PathBuf>,
        /// Fixed top-k operating threshold for `--cams`.
        #[arg(long)]
        operating_tau: Option<f64>,
        /// Also time map construction (F-CAM vs GradCAM vs GAP-CAM).
        #[arg(long)]
        timing: bool,
    },
    /// Search the n_minus and alpha grids, then sweep tau for the winner and the baseline.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Baseline, +SR, +SR+CRF and +SR+CRF+ASC on the test split.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render curves and histograms of stored reports as SVG plus CSV.
    Plot {
        #[arg(long, short, default_value = "run")]
        run: PathBuf,
    },
}

fn print<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(fcam_core::FcamError::from)?;
    // A closed stdout (e.g. piped into `head`) is not a failure of the command.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

fn resolve(args: &RunArgs) -> CliResult<(RunDir, fcam_core::RunConfig)> {
    let run = RunDir::new(&args.run);
    let cfg = run.resolve_config(args.config.config.as_deref(), &args.config.overrides)?;
    Ok((run, cfg))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Config { run } => {
            let (_, cfg) = resolve(&run)?;
            let _ = write!(std::io::stdout().lock(), "{}", cfg.to_toml_string()?);
            Ok(())
        }
        Command::Generate { config, out, seed, force } => {
            let mut overrides = config.overrides.clone();
            if let Some(s) = seed {
                overrides.push(format!("dataset.synthetic.seed={s}"));
            }
            let cfg = standalone_config(config.config.as_deref(), &overrides)?;
            print(&commands::generate(&cfg, out.as_deref(), force)?)
        }
        Command::Train { run } => {
            let (dir, cfg) = resolve(&run)?;
            print(&commands::train(&dir, &cfg)?)
        }
        Command::Finetune { run, grid } => {
            let (dir, cfg) = resolve(&run)?;
            print(&commands::finetune(&dir, &cfg, grid)?)
        }
        Command::Infer { run, images, out, method, class } => {
            let (dir, cfg) = resolve(&run)?;
            print(&commands::infer(&dir, &cfg, &images, &out, method, class)?)
        }
        Command::Eval { run, methods, split, cams, operating_tau, timing } => {
            let (dir, cfg) = resolve(&run)?;
            let split = split.unwrap_or(cfg.eval.split);
            match cams {
                Some(c) => print(&commands::eval_stored(&dir, &cfg, &c, split, operating_tau)?),
                None => print(&commands::eval(&dir, &cfg, &methods, split, timing)?),
            }
        }
        Command::Sweep { run } => {
            let (dir, cfg) = resolve(&run)?;
            print(&commands::sweep(&dir, &cfg)?)
        }
        Command::Ablate { run } => {
            let (dir, cfg) = resolve(&run)?;
            print(&commands::ablate(&dir, &cfg)?)
        }
        Command::Plot { run } => print(&plot::plot(&RunDir::new(run))?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = e.report();
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(report.exit_code as u8)
        }
    }
}
