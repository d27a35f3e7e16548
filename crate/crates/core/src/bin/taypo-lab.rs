use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use taypo_lab::experiment::{run, ExperimentConfig, ExperimentKind};
use taypo_lab::Error;

/// Runs one experiment grid and writes its CSV.
///
/// Exit status: 0 when the run passes, 1 when a checked identity or bound is
/// violated, 2 on configuration or I/O errors.
#[derive(Parser, Debug)]
#[command(name = "taypo-lab", version)]
struct Cli {
    /// figure1, operator_suite, bounds_suite, estimator_bench or optimize
    experiment: ExperimentKind,
    /// TOML file with overrides of the experiment defaults
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Replace the seed list by consecutive seeds starting here
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores)
    #[arg(long)]
    jobs: Option<usize>,
}

fn execute(cli: &Cli) -> Result<bool, Error> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut config = ExperimentConfig::from_toml(cli.experiment, &text)?;
    if let Some(seed) = cli.seed {
        config = config.with_first_seed(seed);
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let output = run(&config)?;
    let file = File::create(&cli.out)?;
    output.write_csv(&config, BufWriter::new(file))?;
    for line in &output.summary {
        eprintln!("{}: {line}", cli.experiment);
    }
    eprintln!(
        "{}: {} rows written to {}",
        cli.experiment,
        output.rows.len(),
        cli.out.display()
    );
    Ok(output.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: FAILED", cli.experiment);
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
