use std::path::Path;

use gvcl::experiment::{record_path, run_experiment, DriverOptions, ExperimentConfig};
use gvcl::runner::{Method, RunRecord};

const TOY: &str = r#"
name = "toy"
seeds = [0]

[dataset]
kind = "toy_clusters"
n_per_class = 20
spread = 0.4

[architecture]
kind = "mlp"
input = 2
hidden = [8]

[methods.vcl]
epochs = 3
eval_samples = 5
"#;

fn options(out: &Path) -> DriverOptions {
    DriverOptions {
        jobs: 2,
        out: Some(out.to_path_buf()),
        data_root: None,
        checkpoints: false,
    }
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn one_seed_gives_one_record_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(TOY, "toy").unwrap();
    let report = run_experiment(&cfg, &options(dir.path())).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.failures(), 0);
    assert!(record_path(dir.path(), "toy", Method::Vcl, 0).is_file());
    assert_eq!(csv_rows(&report.dir.join("metrics.csv")), 1);
    assert_eq!(csv_rows(&report.dir.join("summary.csv")), 1);
    assert_eq!(report.summary[0].acc_std, 0.0);
}

#[test]
fn seeds_spread_and_reruns_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&TOY.replace("seeds = [0]", "seeds = [0, 1, 2]"), "toy").unwrap();
    let first = run_experiment(&cfg, &options(dir.path())).unwrap();
    assert_eq!(first.records.len(), 3);
    assert!(first.summary[0].acc_std > 0.0);
    let second = run_experiment(&cfg, &options(dir.path())).unwrap();
    for (a, b) in first.records.iter().zip(&second.records) {
        assert!(a.same_results(b), "seed {} differs between runs", a.seed);
    }
    let text = std::fs::read_to_string(record_path(dir.path(), "toy", Method::Vcl, 2)).unwrap();
    let stored: RunRecord = serde_json::from_str(&text).unwrap();
    assert!(stored.same_results(&second.records[2]));
    assert_eq!(csv_rows(&first.dir.join("metrics.csv")), 3);
}

#[test]
fn config_errors_carry_a_line_number() {
    let bad = TOY.replace("epochs = 3", "epocs = 3");
    let err = ExperimentConfig::parse(&bad, "bad.toml").unwrap_err().to_string();
    let line = bad.lines().position(|l| l.starts_with("epocs")).unwrap() + 1;
    assert!(err.contains(&format!("bad.toml:{line}")), "{err}");

    let unknown = TOY.replace("[methods.vcl]", "[methods.vlc]");
    assert!(ExperimentConfig::parse(&unknown, "m.toml").is_err());
    let no_seeds = TOY.replace("seeds = [0]", "seeds = []");
    assert!(ExperimentConfig::parse(&no_seeds, "s.toml").is_err());
}

#[test]
fn split_mnist_without_data_is_a_clear_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/split_mnist.toml")).unwrap();
    let opts = DriverOptions {
        data_root: Some(dir.path().to_path_buf()),
        ..options(dir.path())
    };
    let err = run_experiment(&cfg, &opts).unwrap_err().to_string();
    assert!(err.contains("IDX files missing"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
