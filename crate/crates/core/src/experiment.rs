//! Experiment configuration files and the method × seed run driver.
//!
//! A config is TOML with top-level settings and one `[methods.<name>]`
//! table per method:
//!
//! ```toml
//! name = "split_mnist"
//! seeds = [0, 1, 2]
//! out = "runs"
//!
//! [dataset]
//! kind = "split_mnist"
//!
//! [architecture]
//! kind = "mlp"
//! input = 784
//! hidden = [256, 256]
//!
//! [methods.gvcl_film]
//! beta = 0.1
//! lambda = 100.0
//! ```
//!
//! Results land in `<out>/<name>/<method>/<seed>/record.json`, with
//! `metrics.csv`, `summary.csv` and `calibration.csv` next to the method
//! directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic_tasks, gen_toy_clusters, make_split_tasks, IdxPaths, Task, TaskSequence, SPLIT_PAIRS};
use crate::error::{Error, Result};
use crate::metrics::{acc, bwt, fwt, net};
use crate::net::Architecture;
use crate::runner::{run_continual, Method, RunOptions, RunRecord, TrainConfig};

/// Environment variable that overrides the config's `data_root`.
pub const DATA_ROOT_ENV: &str = "GVCL_DATA_ROOT";

/// Source of the task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Binary digit-pair tasks from `<data_root>/mnist`; with `kmnist`, five
    /// more tasks from `<data_root>/kmnist` follow.
    SplitMnist {
        #[serde(default = "default_pairs")]
        pairs: Vec<(usize, usize)>,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        #[serde(default)]
        kmnist: bool,
    },
    Synthetic {
        tasks: usize,
        features: usize,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        seed: u64,
    },
    ToyClusters {
        n_per_class: usize,
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_pairs() -> Vec<(usize, usize)> {
    SPLIT_PAIRS.to_vec()
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub architecture: Architecture,
    /// Keyed by method name; missing keys take the [`TrainConfig`] defaults.
    pub methods: BTreeMap<String, TrainConfig>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the line of the offending entry
    /// when the parser can locate it.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => Error::Config(format!("{origin}:{}: {msg}", line_of(text, span.start))),
                None => Error::Config(format!("{origin}: {msg}")),
            }
        })?;
        cfg.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment name {:?} is not a plain directory name", self.name)));
        }
        self.architecture.validate()?;
        for (name, cfg) in &self.methods {
            let m = Method::parse(name)?;
            cfg.validate(m).map_err(|e| Error::Config(format!("methods.{name}: {e}")))?;
        }
        Ok(())
    }

    /// Method list in a stable order.
    pub fn method_list(&self) -> Result<Vec<(Method, TrainConfig)>> {
        self.methods.iter().map(|(n, c)| Ok((Method::parse(n)?, c.clone()))).collect()
    }

    /// Dataset root: `flag`, then the environment variable, then the config.
    pub fn resolve_data_root(&self, flag: Option<&Path>) -> Option<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .or_else(|| self.data_root.clone())
    }

    pub fn load_tasks(&self, data_root: Option<&Path>) -> Result<TaskSequence> {
        match &self.dataset {
            DatasetSpec::SplitMnist {
                pairs,
                val_fraction,
                kmnist,
            } => {
                let root = data_root.ok_or_else(|| {
                    Error::Config(format!("split_mnist needs a data root (config, --data-root or {DATA_ROOT_ENV})"))
                })?;
                let load = |sub: &str| -> Result<TaskSequence> {
                    let paths = IdxPaths::in_dir(&root.join(sub));
                    if !paths.exist() {
                        return Err(Error::Config(format!("IDX files missing under {}", root.join(sub).display())));
                    }
                    let (train, test) = paths.load()?;
                    make_split_tasks(&train, &test, pairs, *val_fraction)
                };
                let mnist = load("mnist")?;
                if !kmnist {
                    return Ok(mnist);
                }
                let k = load("kmnist")?;
                let offset = mnist.len();
                let mut tasks: Vec<Task> = mnist.tasks().to_vec();
                tasks.extend(k.tasks().iter().cloned().map(|mut t| {
                    t.id += offset;
                    t
                }));
                TaskSequence::new(tasks)
            }
            DatasetSpec::Synthetic {
                tasks,
                features,
                n_train,
                n_test,
                seed,
            } => gen_synthetic_tasks(*seed, *tasks, *features, *n_train, *n_test),
            DatasetSpec::ToyClusters {
                n_per_class,
                spread,
                seed,
            } => gen_toy_clusters(*seed, *n_per_class, *spread),
        }
    }
}

/// `<out>/<experiment>/<method>/<seed>/record.json`
pub fn record_path(out: &Path, experiment: &str, method: Method, seed: u64) -> PathBuf {
    out.join(experiment).join(method.name()).join(seed.to_string()).join("record.json")
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub tasks: usize,
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub net: Option<f64>,
    pub ece: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

impl MetricsRow {
    pub fn from_record(r: &RunRecord) -> Self {
        let m = &r.matrix;
        Self {
            method: r.method.name().into(),
            seed: r.seed,
            tasks: m.tasks(),
            acc: acc(m).ok(),
            bwt: bwt(m).ok(),
            fwt: fwt(m).ok(),
            net: net(m).ok(),
            ece: r.ece,
            seconds: r.task_seconds.iter().sum(),
            error: r.error.clone(),
        }
    }
}

/// One row of `summary.csv`: mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub bwt_mean: f64,
    pub bwt_std: f64,
    pub ece_mean: f64,
    pub ece_std: f64,
}

/// `(mean, sample std)`; the std of a single value is 0.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut by: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.error.is_none()) {
        by.entry(r.method.as_str()).or_default().push(r);
    }
    by.into_iter()
        .map(|(method, rs)| {
            let col = |f: &dyn Fn(&MetricsRow) -> Option<f64>| mean_std(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (acc_mean, acc_std) = col(&|r| r.acc);
            let (bwt_mean, bwt_std) = col(&|r| r.bwt);
            let (ece_mean, ece_std) = col(&|r| r.ece);
            SummaryRow {
                method: method.into(),
                runs: rs.len(),
                acc_mean,
                acc_std,
                bwt_mean,
                bwt_std,
                ece_mean,
                ece_std,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub method: String,
    pub seed: u64,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub mean_conf: f64,
    pub acc: f64,
    pub count: usize,
}

/// Writes `rows` as a headed CSV file, creating parent directories.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct DriverOptions {
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    pub checkpoints: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub metrics: Vec<MetricsRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.metrics.iter().filter(|m| m.error.is_some()).count()
    }
}

/// Runs every method × seed pair, at most `jobs` at a time, and writes the
/// records and CSV tables. A failed run is recorded and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &DriverOptions) -> Result<ExperimentReport> {
    let root = cfg.resolve_data_root(opts.data_root.as_deref());
    let tasks = cfg.load_tasks(root.as_deref())?;
    let out = opts.out.clone().unwrap_or_else(|| cfg.out.clone());
    let dir = out.join(&cfg.name);
    let mut work = Vec::new();
    for (method, tc) in cfg.method_list()? {
        for &seed in &cfg.seeds {
            work.push((method, tc.clone(), seed));
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; work.len()]);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let jobs = opts.jobs.clamp(1, work.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((method, tc, seed)) = work.get(i) else { break };
                let path = record_path(&out, &cfg.name, *method, *seed);
                let ropts = RunOptions {
                    checkpoint_dir: opts.checkpoints.then(|| path.with_file_name("checkpoints")),
                };
                log::info!("{} seed {seed}: starting", method.name());
                let record = match run_continual(*method, &tasks, &cfg.architecture, tc, *seed, &ropts) {
                    Ok(r) => r,
                    Err(e) => {
                        log::error!("{} seed {seed}: {e}", method.name());
                        failed_record(*method, tc, &cfg.architecture, *seed, &e)
                    }
                };
                if let Err(e) = write_record(&path, &record) {
                    first_error.lock().expect("lock").get_or_insert(e);
                }
                results.lock().expect("lock")[i] = Some(record);
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("lock") {
        return Err(e);
    }
    let records: Vec<RunRecord> = results.into_inner().expect("lock").into_iter().flatten().collect();
    let metrics: Vec<MetricsRow> = records.iter().map(MetricsRow::from_record).collect();
    let summary = summarize(&metrics);
    let calibration: Vec<CalibrationRow> = records
        .iter()
        .flat_map(|r| {
            r.calibration.iter().enumerate().map(|(bin, b)| CalibrationRow {
                method: r.method.name().into(),
                seed: r.seed,
                bin,
                lower: b.lower,
                upper: b.upper,
                mean_conf: b.mean_confidence,
                acc: b.accuracy,
                count: b.count,
            })
        })
        .collect();
    write_csv(&dir.join("metrics.csv"), &metrics)?;
    write_csv(&dir.join("summary.csv"), &summary)?;
    write_csv(&dir.join("calibration.csv"), &calibration)?;
    Ok(ExperimentReport {
        dir,
        records,
        metrics,
        summary,
    })
}

fn failed_record(method: Method, cfg: &TrainConfig, arch: &Architecture, seed: u64, e: &Error) -> RunRecord {
    RunRecord {
        method,
        seed,
        config: cfg.clone(),
        architecture: arch.clone(),
        matrix: crate::metrics::ResultMatrix {
            rows: Vec::new(),
            independent: None,
        },
        calibration: Vec::new(),
        ece: None,
        task_seconds: Vec::new(),
        checkpoints: Vec::new(),
        error: Some(e.to_string()),
    }
}

fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(record)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "toy"
seeds = [0, 1]

[dataset]
kind = "toy_clusters"
n_per_class = 20
spread = 0.4

[architecture]
kind = "mlp"
input = 2
hidden = [8]

[methods.vcl]
epochs = 2

[methods.gvcl_film]
beta = 0.1
lambda = 100.0
"#;

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::parse(SAMPLE, "sample").unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap(), "again").unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.methods["gvcl_film"].lambda, 100.0);
        assert_eq!(cfg.out, PathBuf::from("runs"));
    }

    #[test]
    fn errors_name_the_line() {
        let bad = SAMPLE.replace("epochs = 2", "epochz = 2");
        let err = ExperimentConfig::parse(&bad, "bad.toml").unwrap_err().to_string();
        let line = bad.lines().position(|l| l.starts_with("epochz")).unwrap() + 1;
        assert!(err.contains(&format!("bad.toml:{line}")), "{err}");
    }

    #[test]
    fn unknown_method_and_empty_seeds_are_rejected() {
        let bad = SAMPLE.replace("[methods.vcl]", "[methods.vlc]");
        assert!(ExperimentConfig::parse(&bad, "x").is_err());
        let bad = SAMPLE.replace("seeds = [0, 1]", "seeds = []");
        assert!(ExperimentConfig::parse(&bad, "x").is_err());
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
