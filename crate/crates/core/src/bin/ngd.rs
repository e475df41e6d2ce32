use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ngd::experiment::{self, output, report, ExperimentConfig};
use ngd::{NgdError, Result};

#[derive(Parser)]
#[command(name = "ngd", version, about = "Network gradient descent simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replicates; never changes results.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    record_every: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset, partition and graph of the first replicate.
    GenData(Common),
    /// Run every replicate for every learning rate.
    Run(Common),
    /// Repeat the run over in-degrees.
    SweepDegree {
        #[command(flatten)]
        common: Common,
        /// Comma-separated degrees; defaults to `[sweep] degrees`.
        #[arg(long, value_delimiter = ',')]
        degrees: Option<Vec<usize>>,
    },
    /// Spectral and balance diagnostics without running NGD.
    Diagnose(Common),
    /// Merge result directories into summary tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.base_seed = s;
    }
    if let Some(r) = c.record_every {
        cfg.record_every = r;
    }
    cfg.validate()?;
    if c.workers == 0 {
        return Err(NgdError::Config("--workers must be at least 1".into()));
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| NgdError::Config("--out is required".into()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let res = experiment::cmd_gen_data(&cfg, out_dir(&c)?)?;
            println!("{}  {}", res.digest, res.dataset.display());
        }
        Command::Run(c) => {
            let cfg = load(&c)?;
            let summary = experiment::cmd_run(&cfg, out_dir(&c)?, c.workers)?;
            print!("{}", output::summary_lines(&cfg.topology.label(), &summary));
        }
        Command::SweepDegree { common, degrees } => {
            let cfg = load(&common)?;
            let rows = experiment::cmd_sweep_degree(&cfg, degrees.as_deref(), out_dir(&common)?, common.workers)?;
            for r in rows {
                println!(
                    "degree={} alpha={} median_final_log_mse={:.4} global={:.4} diverged={}",
                    r.degree, r.alpha, r.median, r.global_median_log_mse, r.diverged
                );
            }
        }
        Command::Diagnose(c) => {
            let cfg = load(&c)?;
            let diag = experiment::cmd_diagnose(&cfg)?;
            match &c.out {
                Some(dir) => {
                    output::ensure_dir(dir)?;
                    output::write_json(&dir.join("diagnose.json"), &diag)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&diag).expect("serializable")),
            }
        }
        Command::Report { out, inputs } => {
            let res = report::cmd_report(&inputs, &out)?;
            println!("merged {} runs and {} sweeps into {}", res.runs, res.sweeps, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
