use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use funcval::pipeline::{Pipeline, RunConfig, Stage};
use funcval::synth::{synth_testbed, SynthSpec};
use funcval::{Error, Result};

#[derive(Parser)]
#[command(name = "funcval", version, about = "Bayesian validation of computer models with functional output")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Align field curves to the model reference curve.
    Register(RunArgs),
    /// Wavelet-decompose all curves and select retained coefficients.
    Decompose(RunArgs),
    /// Fit one emulator per retained coefficient.
    Fit(RunArgs),
    /// Sample the calibration posterior.
    Calibrate(RunArgs),
    /// Bias, reality and new-field-run bands.
    Predict(RunArgs),
    /// Configured extrapolation bands.
    Extrapolate(RunArgs),
    /// Run every stage, or every stage from `--stage` on.
    All {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        stage: Option<String>,
    },
    /// Write a synthetic dataset with known truth and a matching config.
    Synth {
        /// Synthetic-bed settings (TOML); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn pipeline(args: &RunArgs) -> Result<Pipeline> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.paths.output_dir = std::path::absolute(out).map_err(|e| Error::io(out, e))?;
    }
    Pipeline::new(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let single = |args: &RunArgs, stage: Stage| pipeline(args)?.run_stage(stage);
    match cli.command {
        Command::Register(a) => single(&a, Stage::Register),
        Command::Decompose(a) => single(&a, Stage::Decompose),
        Command::Fit(a) => single(&a, Stage::Fit),
        Command::Calibrate(a) => single(&a, Stage::Calibrate),
        Command::Predict(a) => single(&a, Stage::Predict),
        Command::Extrapolate(a) => single(&a, Stage::Extrapolate),
        Command::All { run, stage } => {
            let first = stage.as_deref().map(str::parse).transpose()?.unwrap_or(Stage::Register);
            let p = pipeline(&run)?;
            p.run_from(first)?;
            println!("{}", p.out_dir().display());
            Ok(())
        }
        Command::Synth { config, seed, out } => {
            let spec = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    toml::from_str(&text).map_err(|e| Error::Config {
                        field: "synth".into(),
                        msg: e.message().trim().to_string(),
                    })?
                }
                None => SynthSpec::default(),
            };
            let data = synth_testbed(&spec, seed, &out)?;
            println!("{}", data.config_path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
