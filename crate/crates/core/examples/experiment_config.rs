//! Running a TOML experiment through the driver, as `gvcl run` does.
//!
//! `cargo run --example experiment_config -- configs/split_mnist.toml`
//! runs a different config; the default is the cluster toy.

use std::path::PathBuf;

use gvcl::experiment::{run_experiment, DriverOptions, ExperimentConfig};

fn main() -> gvcl::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_clusters.toml"));
    let cfg = ExperimentConfig::load(&path)?;
    let out = std::env::temp_dir().join("gvcl-example");
    let report = run_experiment(
        &cfg,
        &DriverOptions {
            jobs: 2,
            out: Some(out),
            ..DriverOptions::default()
        },
    )?;
    for s in &report.summary {
        println!("{:>10}: ACC {:.4} ± {:.4} over {} runs", s.method, s.acc_mean, s.acc_std, s.runs);
    }
    println!("tables in {}", report.dir.display());
    Ok(())
}
