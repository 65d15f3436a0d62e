use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use vlasov_mixing::config::{Experiment, RunConfig};
use vlasov_mixing::run::{run, EXIT_VALIDATION};

/// Run a configured experiment and write its artifacts.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// TOML run configuration.
    config: PathBuf,
    /// Override the experiment: simulate, stationary, kernel, decay or verify.
    #[arg(long)]
    experiment: Option<Experiment>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    };
    if let Some(x) = cli.experiment {
        cfg.experiment = x;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    if let Some(w) = cli.workers.or(cfg.workers) {
        cfg.workers = Some(w);
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: cannot size worker pool: {e}");
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    }
    match run(&cfg) {
        Ok(outcome) => {
            println!("{}", outcome.summary_line);
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
