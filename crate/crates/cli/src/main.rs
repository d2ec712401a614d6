use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use memtangle_cli::{
    cmd_analyze, cmd_decode, cmd_evaluate, cmd_generate, cmd_pipeline, cmd_train, load_json,
    threads_from_env, AnalysisConfig, AnalyzeArgs, AnalyzeMode, CliError, DecodeArgs, EvaluateArgs,
    GenerateArgs, PipelineConfig, TrainArgs,
};
use memtangle_core::model::{Method, TrainConfig};

#[derive(Parser)]
#[command(
    name = "memtangle",
    version,
    about = "Synthetic memory-entanglement experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Ridge, RSA or auto-RSA curves over offsets.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ridge", value_parser = clap::builder::PossibleValuesParser::new(["ridge", "rsa", "auto-rsa"]))]
        mode: String,
        /// JSON analysis config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_k: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "analysis")]
        out_dir: PathBuf,
    },
    /// Train decoders, one per seed.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["sf", "dis"])]
        method: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        /// JSON training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        m: usize,
        #[arg(long)]
        validation_m: Option<usize>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Decode the test windows of a checkpoint's split to JSONL.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score decoded JSONL files.
    Evaluate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run everything end to end from one config.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, short)]
        out_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = threads_from_env()?;
    match cli.command {
        Command::Generate { config, seed, out } => {
            let m = cmd_generate(&GenerateArgs {
                config,
                out: out.clone(),
                seed,
                manifest: None,
            })?;
            println!("wrote {} (sha256 {})", out.display(), m.dataset_sha256);
        }
        Command::Analyze {
            data,
            mode,
            config,
            max_k,
            lambda,
            m,
            seed,
            out_dir,
        } => {
            let mut cfg: AnalysisConfig = match config {
                Some(p) => load_json(&p)?,
                None => AnalysisConfig::default(),
            };
            cfg.max_k = max_k.unwrap_or(cfg.max_k);
            cfg.lambda = lambda.unwrap_or(cfg.lambda);
            cfg.m = m.unwrap_or(cfg.m);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let summary = cmd_analyze(&AnalyzeArgs {
                dataset: data,
                mode: mode.parse::<AnalyzeMode>()?,
                config: cfg,
                out_dir,
            })?;
            print!("{}", summary.to_csv());
        }
        Command::Train {
            data,
            method,
            alpha,
            seeds,
            config,
            m,
            validation_m,
            out_dir,
        } => {
            let train: TrainConfig = match config {
                Some(p) => load_json(&p)?,
                None => TrainConfig::default(),
            };
            let manifest = cmd_train(&TrainArgs {
                dataset: data,
                method: method.parse::<Method>()?,
                alpha,
                seeds,
                train,
                m,
                validation_m,
                out_dir,
                threads,
            })?;
            for file in manifest.outputs.keys() {
                println!("wrote {file}");
            }
        }
        Command::Decode {
            checkpoint,
            data,
            split_seed,
            m,
            out,
        } => {
            let records = cmd_decode(&DecodeArgs {
                checkpoint,
                dataset: data,
                split_seed,
                m,
                out: out.clone(),
            })?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Evaluate { inputs, out_dir } => {
            let report = cmd_evaluate(&EvaluateArgs { inputs, out_dir })?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            print!("{}", report.to_table());
        }
        Command::Pipeline { config, out_dir } => {
            let cfg: PipelineConfig = match config {
                Some(p) => load_json(&p)?,
                None => PipelineConfig::default(),
            };
            let out = cmd_pipeline(&cfg, &out_dir, threads)?;
            for w in &out.report.warnings {
                log::warn!("{w}");
            }
            print!("{}", out.report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
