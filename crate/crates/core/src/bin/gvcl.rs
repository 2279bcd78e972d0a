use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gvcl::experiment::{run_experiment, DriverOptions, ExperimentConfig};
use gvcl::toys::{run_toy, Toy};
use gvcl::verify::{render_table, run_suite, suite};

#[derive(Parser)]
#[command(version, about = "Continual learning with tempered variational inference and FiLM layers")]
struct Cli {
    /// Concurrent method x seed runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Dataset root; overrides GVCL_DATA_ROOT and the config.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method x seed of an experiment config.
    Run { config: PathBuf },
    /// Run a synthetic experiment: curvature, ewc-convergence, film-scale or pruning.
    Toy { name: String },
    /// Run the property checks.
    Verify,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let opts = DriverOptions {
                jobs: cli.jobs,
                out: cli.out,
                data_root: cli.data_root,
                checkpoints: false,
            };
            let report = match run_experiment(&cfg, &opts) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::FAILURE;
                }
            };
            println!("{:<10} {:>4} {:>16} {:>16}", "method", "runs", "acc", "bwt");
            for s in &report.summary {
                println!(
                    "{:<10} {:>4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
                    s.method, s.runs, s.acc_mean, s.acc_std, s.bwt_mean, s.bwt_std
                );
            }
            println!("results in {}", report.dir.display());
            if report.failures() > 0 {
                eprintln!("{} run(s) failed; see metrics.csv", report.failures());
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Command::Toy { name } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs"));
            let result = Toy::parse(&name).and_then(|toy| run_toy(toy, &out));
            match result {
                Ok((path, summary)) => {
                    println!("{summary}");
                    println!("wrote {}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Verify => {
            let outcomes = run_suite(&suite());
            print!("{}", render_table(&outcomes));
            if outcomes.iter().all(|o| o.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
