use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hybrid_filter::experiment::{load_config, metadata_path, run_experiment_with, write_csv, Overrides};
use hybrid_filter::parallel::Parallelism;

#[derive(Parser)]
#[command(version, about = "Ensemble runs of the SME filter and quantum EKF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an ensemble and write the result CSV plus a `.meta` sidecar.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "n-traj")]
        n_traj: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        xi: Option<f64>,
        /// Worker threads; 1 runs sequentially. Output does not depend on it.
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn run(
    config: PathBuf,
    overrides: Overrides,
    threads: Option<usize>,
) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = load_config(&config)?.with_overrides(&overrides)?;
    let par = match threads {
        Some(0) => return Err("--threads must be at least 1".into()),
        Some(1) => Parallelism::Sequential,
        _ => Parallelism::Parallel,
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let result = run_experiment_with(&cfg, par)?;
    write_csv(&result, &cfg.out_path)?;
    for a in &result.aborted {
        eprintln!("warning: trajectory {} aborted: {}", a.index, a.reason);
    }
    println!(
        "wrote {} rows to {} ({} trajectories, seed {}); metadata in {}",
        result.t.len(),
        cfg.out_path.display(),
        cfg.n_traj,
        cfg.base_seed,
        metadata_path(&cfg.out_path).display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            n_traj,
            xi,
            threads,
        } => run(
            config,
            Overrides {
                out_path: out,
                base_seed: seed,
                n_traj,
                xi,
            },
            threads,
        ),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
