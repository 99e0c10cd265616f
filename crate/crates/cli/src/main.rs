use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlf_core::pipeline::{self, Level, Overrides, PipelineConfig};

#[derive(Parser)]
#[command(name = "tlf", version, about = "Transit load forecasting pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    window_minutes: Option<u32>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city with noisy APC data.
    Synth,
    /// Parse the raw inputs and report per-row diagnostics.
    Ingest,
    /// Apply the cleaning rules and derive loads.
    Clean,
    /// Join context data and aggregate to trips and stops.
    Fuse,
    /// Train one model, or all of them without --level.
    Train {
        #[arg(long)]
        level: Option<Level>,
    },
    /// Predict bins for a fused trips or stops file.
    Predict {
        #[arg(long)]
        level: Level,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        query: PathBuf,
        /// Predictions CSV; defaults to <out>/predictions/<level>.csv.
        #[arg(long = "predictions")]
        predictions: Option<PathBuf>,
    },
    /// Score a model on its test split, or all models without --level.
    Evaluate {
        #[arg(long)]
        level: Option<Level>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also score the baselines and compare.
        #[arg(long)]
        baselines: bool,
    },
    /// Summarize every evaluation report.
    Report,
}

fn run(cli: Cli) -> tlf_core::Result<()> {
    let g = cli.global;
    let config = g
        .config
        .ok_or_else(|| tlf_core::Error::Config("--config PATH is required".into()))?;
    let overrides = Overrides {
        seed: g.seed,
        window_minutes: g.window_minutes,
        out_dir: g.out,
    };
    let cfg = PipelineConfig::load(&config, &overrides)?;
    let threads = g
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(tlf_core::Error::Config("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| tlf_core::Error::Config(format!("thread pool: {e}")))?;
    log::info!("{} with {threads} threads, output in {}", pipeline::VERSION, cfg.out_dir.display());

    match cli.command {
        Command::Synth => {
            pipeline::run_synth(&cfg)?;
        }
        Command::Ingest => {
            pipeline::run_ingest(&cfg)?;
        }
        Command::Clean => {
            pipeline::run_clean(&cfg)?;
        }
        Command::Fuse => {
            pipeline::run_fuse(&cfg)?;
        }
        Command::Train { level } => {
            for l in level.map_or(Level::ALL.to_vec(), |l| vec![l]) {
                pipeline::run_train(&cfg, l)?;
            }
        }
        Command::Predict {
            level,
            model,
            query,
            predictions,
        } => {
            let out = predictions.unwrap_or_else(|| cfg.out_dir.join("predictions").join(format!("{level}.csv")));
            let n = pipeline::run_predict(&cfg, level, model.as_deref(), &query, &out)?;
            log::info!("wrote {n} predictions to {}", out.display());
        }
        Command::Evaluate {
            level,
            model,
            baselines,
        } => {
            if level.is_none() && model.is_some() {
                return Err(tlf_core::Error::Config("--model needs --level".into()));
            }
            for l in level.map_or(Level::ALL.to_vec(), |l| vec![l]) {
                pipeline::run_evaluate(&cfg, l, model.as_deref(), baselines)?;
            }
        }
        Command::Report => {
            let rows = pipeline::run_report(&cfg)?;
            for r in rows {
                println!(
                    "{:<14} {:<20} evaluated={:<7} exact={:<7} rmse={:.4} f1={:.4}",
                    r.level, r.model, r.evaluated, r.exact, r.rmse, r.f1
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TLF_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tlf: {e}");
            ExitCode::FAILURE
        }
    }
}
