//! One GVCL-FiLM run over the five MNIST digit pairs. Needs the IDX files
//! under `$GVCL_DATA_ROOT/mnist` (default `data/mnist`).

use std::path::PathBuf;

use gvcl::data::{make_split_tasks, IdxPaths, SPLIT_PAIRS};
use gvcl::metrics::{acc, bwt};
use gvcl::net::Architecture;
use gvcl::runner::{run_continual, Method, RunOptions, TrainConfig};

fn main() -> gvcl::Result<()> {
    let root = std::env::var_os(gvcl::experiment::DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let (train, test) = IdxPaths::in_dir(&root.join("mnist")).load()?;
    let tasks = make_split_tasks(&train, &test, &SPLIT_PAIRS, 0.1)?;
    let arch = Architecture::Mlp {
        input: 784,
        hidden: vec![256, 256],
    };
    let cfg = TrainConfig {
        epochs: 10,
        beta: 0.1,
        lambda: 100.0,
        init_logvar: -7.0,
        eval_samples: 20,
        ..TrainConfig::default()
    };
    let record = run_continual(Method::GvclFilm, &tasks, &arch, &cfg, 0, &RunOptions::default())?;
    for row in &record.matrix.rows {
        println!("{}", row.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join("  "));
    }
    println!("ACC {:.4} BWT {:+.4} ECE {:?}", acc(&record.matrix)?, bwt(&record.matrix)?, record.ece);
    Ok(())
}
