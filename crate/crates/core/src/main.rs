use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use enemf::harness::{
    default_output_path, run_sweep, write_kernel_table, ConfigFile, Experiment, ExperimentConfig, Overrides, Sweep,
};
use enemf::Error;

#[derive(Parser)]
#[command(name = "enemf", version, about = "Ensemble Epanechnikov mixture filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One-step update on the n-dimensional banana problem, swept over n.
    Banana {
        #[command(flatten)]
        common: Common,
        /// Dimensions, e.g. `1:50`, `2:20:2` or `1,5,10`.
        #[arg(long)]
        dims: Option<Sweep>,
        /// Ensemble size.
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Cycled filtering of the 40-variable Lorenz '96 model, swept over ensemble size.
    L96 {
        #[command(flatten)]
        common: Common,
        /// Ensemble sizes, e.g. `100:500:50`.
        #[arg(long)]
        ns: Option<Sweep>,
        /// Number of assimilation windows.
        #[arg(long)]
        windows: Option<usize>,
        /// Leading windows left out of the RMSE.
        #[arg(long)]
        discard: Option<usize>,
    },
    /// Kernel bandwidths and Gaussian kernel efficiency per dimension.
    KernelTable {
        #[arg(long, default_value = "1:50")]
        dims: Sweep,
        #[arg(long, default_value_t = 100)]
        particles: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output CSV; defaults to ./results/<experiment>-<timestamp>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte-Carlo runs per sweep value.
    #[arg(long)]
    mc: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            workers: self.workers,
            mc: self.mc,
            out: self.out.clone(),
            ..Overrides::default()
        }
    }
}

fn experiment(common: Common, experiment: Experiment, overrides: Overrides) -> Result<ExitCode, Error> {
    let file = common.config.as_deref().map(ConfigFile::load).transpose()?;
    let cfg = ExperimentConfig::resolve(experiment, file, &overrides)?;
    let path = cfg.output_path_or_default();
    let result = run_sweep(&cfg)?;
    let (csv, sidecar) = result.write(&path)?;
    let diverged: usize = result.cells.iter().flatten().map(|c| c.diverged).sum();
    eprintln!(
        "wrote {} and {} ({} runs, {} diverged, {:.1} s)",
        csv.display(),
        sidecar.display(),
        result.records.len(),
        diverged,
        result.wall_seconds
    );
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Banana { common, dims, particles } => {
            let overrides = Overrides {
                dims,
                particles,
                ..common.overrides()
            };
            experiment(common, Experiment::Banana, overrides)
        }
        Command::L96 {
            common,
            ns,
            windows,
            discard,
        } => {
            let overrides = Overrides {
                ns,
                windows,
                discard,
                ..common.overrides()
            };
            experiment(common, Experiment::L96, overrides)
        }
        Command::KernelTable { dims, particles, out } => {
            if particles == 0 {
                return Err(Error::Config("particles must be positive".into()));
            }
            let path = out.unwrap_or_else(|| default_output_path("kernel-table"));
            let (csv, _) = write_kernel_table(&path, &dims.0, particles)?;
            eprintln!("wrote {}", csv.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("runtime error: {e}");
            ExitCode::from(1)
        }
    }
}
