use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use damix_core::experiment::{
    build_report, default_out_root, render_report, run_ablation, run_experiment, ExperimentConfig, ReportFormat, StopAfter, Variant,
};
use damix_core::synthetic::generate_benchmark;
use damix_core::{verify, Error};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "damix", version, about = "Multi-source domain adaptation for re-identification on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration, or the full ablation matrix.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this stage.
        #[arg(long, value_enum, default_value_t = StageArg::Adapt)]
        stage: StageArg,
        /// Output root; defaults to $DAMIX_OUT or ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run BN, DSBN and RDSBN, each with and without MDIF.
        #[arg(long)]
        ablation: bool,
        /// Seeds for the ablation matrix.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Run the gradient, invariant and oracle suites.
    Verify,
    /// Summarize one run per epoch, or compare several runs.
    Report {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic benchmark to disk.
    GenData {
        /// Experiment config; built-in defaults when omitted.
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pretrain,
    Adapt,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Format { .. }) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let cfg = match path {
        // an unreadable config file is a config error, not a runtime one
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn emit(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run {
            config,
            seed,
            stage,
            out,
            ablation,
            seeds,
        } => {
            let cfg = load_config(Some(&config), seed)?;
            let root = out.unwrap_or_else(default_out_root);
            if ablation {
                let seeds = seed.map_or(seeds, |s| vec![s]);
                let report = run_ablation(&cfg, &seeds, &Variant::ALL, &root)?;
                print!("{}", report.table());
                println!("ablation written to {}", root.display());
                return Ok(0);
            }
            let stop = match stage {
                StageArg::Pretrain => StopAfter::Pretrain,
                StageArg::Adapt => StopAfter::Adapt,
            };
            let manifest = run_experiment(&cfg, &root, stop)?;
            println!("{}", manifest.run_dir.join("manifest.json").display());
            match &manifest.failure {
                None => Ok(0),
                Some(f) => {
                    log::error!("{} stage failed: {}", f.stage, f.diagnostic);
                    Ok(EXIT_RUNTIME)
                }
            }
        }
        Command::Verify => {
            let suites = verify::run_all();
            print!("{}", verify::render_table(&suites));
            Ok(if suites.iter().all(verify::Suite::passed) { 0 } else { EXIT_VERIFY })
        }
        Command::Report { manifests, format, out } => {
            let report = build_report(&manifests)?;
            let format = match format {
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Csv => ReportFormat::Csv,
            };
            emit(&render_report(&report, format), out.as_deref())?;
            Ok(0)
        }
        Command::GenData { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let bench = generate_benchmark(&cfg.data)?;
            for p in bench.save(&out)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
