use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use uqhedge::pipeline::{self, Calibration, RunConfig, Scale};
use uqhedge::HedgeError;

#[derive(Parser, Debug)]
#[command(
    name = "uqhedge",
    version,
    about = "Uncertainty-aware deep hedging pipeline"
)]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Training budget preset.
    #[arg(long, global = true, value_enum)]
    scale: Option<ScaleArg>,
    /// Named Heston calibration.
    #[arg(long, global = true, value_enum)]
    calibration: Option<CalibrationArg>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one hedger on frictionless GBM and compare against Black-Scholes.
    ValidateGbm {
        #[arg(long)]
        mae_threshold: Option<f64>,
        #[arg(long)]
        price_tolerance: Option<f64>,
    },
    /// Simulate the evaluation paths.
    Simulate,
    /// Train the ensemble and store member checkpoints.
    TrainEnsemble,
    /// Evaluate stored checkpoints and export every table and figure.
    Evaluate,
    /// Fit the blend coefficients from stored checkpoints.
    FitBlend,
    /// Simulate, train and evaluate in one run.
    FullPipeline,
    /// Full pipeline for each named calibration plus a summary table.
    CrossCalibration,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CalibrationArg {
    Baseline,
    HighVov,
    LowCorr,
}

fn build_config(cli: &Cli) -> uqhedge::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.scale {
        cfg.set_scale(match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        });
    }
    if let Some(c) = cli.calibration {
        cfg.heston = None;
        cfg.calibration = match c {
            CalibrationArg::Baseline => Calibration::Baseline,
            CalibrationArg::HighVov => Calibration::HighVov,
            CalibrationArg::LowCorr => Calibration::LowCorr,
        };
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Command::ValidateGbm {
        mae_threshold,
        price_tolerance,
    } = cli.command
    {
        if let Some(t) = mae_threshold {
            cfg.gbm.mae_threshold = t;
        }
        if let Some(t) = price_tolerance {
            cfg.gbm.price_tolerance = t;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) -> uqhedge::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: &Cli) -> uqhedge::Result<ExitCode> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::ValidateGbm { .. } => {
            let r = pipeline::cmd_validate_gbm(&cfg)?;
            print_json(&r)?;
            if !r.mae_passed {
                eprintln!(
                    "delta MAE {:.4} exceeds threshold {}",
                    r.delta_mae, r.mae_threshold
                );
                return Ok(ExitCode::from(1));
            }
        }
        Command::Simulate => {
            let p = pipeline::cmd_simulate(&cfg)?;
            println!(
                "simulated {} paths x {} steps into {}",
                p.n_paths(),
                p.n_steps(),
                cfg.output_dir.display()
            );
        }
        Command::TrainEnsemble => {
            let e = pipeline::cmd_train_ensemble(&cfg)?;
            let finals: Vec<f64> = e
                .losses
                .iter()
                .map(|l| *l.last().unwrap_or(&f64::NAN))
                .collect();
            print_json(&serde_json::json!({ "member_seeds": e.seeds, "final_losses": finals }))?;
        }
        Command::Evaluate => print_json(&pipeline::cmd_evaluate(&cfg)?.headline)?,
        Command::FitBlend => print_json(&pipeline::cmd_fit_blend(&cfg)?)?,
        Command::FullPipeline => print_json(&pipeline::full_pipeline(&cfg)?.headline)?,
        Command::CrossCalibration => print_json(&pipeline::cross_calibration(&cfg)?)?,
        Command::PrintConfig => print!("{}", cfg.to_toml_string()?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit(&e)
        }
    }
}

fn exit(e: &HedgeError) -> ExitCode {
    ExitCode::from(pipeline::exit_code(e) as u8)
}
