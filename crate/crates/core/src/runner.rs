//! Sequential training over a task sequence.
//!
//! Variational methods turn each task's posterior into the next task's prior
//! (wrapped with the λ-clipped precision); point-estimate methods accumulate
//! an Online EWC state instead. After each task every seen task is evaluated
//! to fill one row of the result matrix.

use std::path::PathBuf;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{shuffled_batches, Dataset, Task, TaskSequence};
use crate::error::{Error, Result};
use crate::gaussian::{temper, ClippedPrecisionPrior, DiagGaussian};
use crate::metrics::{calibration_bins, ece, CalibrationBin, ResultMatrix, DEFAULT_ECE_BINS};
use crate::net::{init_net, seeded_rng, Architecture, Binding, NetInit, Noise, ParamMode, PredictMode, VariationalNet};
use crate::objectives::{beta_elbo_loss, ewc_loss, ewc_update_state, fisher_diag, EwcState, FisherMode, GvclConfig, KlTerms};
use crate::optim::{Adam, Sgd};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gvcl,
    GvclFilm,
    Vcl,
    VclFilm,
    Ewc,
    EwcFilm,
    MapSgd,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Gvcl,
        Method::GvclFilm,
        Method::Vcl,
        Method::VclFilm,
        Method::Ewc,
        Method::EwcFilm,
        Method::MapSgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gvcl => "gvcl",
            Method::GvclFilm => "gvcl_film",
            Method::Vcl => "vcl",
            Method::VclFilm => "vcl_film",
            Method::Ewc => "ewc",
            Method::EwcFilm => "ewc_film",
            Method::MapSgd => "map_sgd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    pub fn film(self) -> bool {
        matches!(self, Method::GvclFilm | Method::VclFilm | Method::EwcFilm)
    }

    pub fn variational(self) -> bool {
        matches!(self, Method::Gvcl | Method::GvclFilm | Method::Vcl | Method::VclFilm)
    }
}

/// Per-method training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub mc_samples: usize,
    pub kl_scale: bool,
    /// Epochs per task for variational methods.
    pub epochs: usize,
    /// Adam step size for variational methods.
    pub lr: f64,
    pub batch_size: usize,
    pub eval_samples: usize,
    pub eval_mode: PredictMode,
    /// Variance of the initial isotropic prior.
    pub prior_var: f64,
    pub init_logvar: f64,
    pub weight_scale: f64,
    /// Posterior variance factor applied before it becomes the next prior.
    pub temper: Option<f64>,
    pub ewc_lambda: f64,
    pub ewc_gamma: f64,
    pub fisher_mode: FisherMode,
    /// Estimate the Fisher from at most this many training examples, scaled
    /// up to the full set.
    pub fisher_limit: Option<usize>,
    pub sgd_lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Epochs without improvement before the SGD step decays.
    pub lr_patience: usize,
    pub lr_decay: f64,
    pub min_lr: f64,
    /// Also train each task alone to obtain independent-training accuracies.
    pub reference: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 1.0,
            gamma: 1.0,
            mc_samples: 1,
            kl_scale: true,
            epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            eval_samples: 100,
            eval_mode: PredictMode::Sampled,
            prior_var: 1.0,
            init_logvar: (1e-6f64).ln(),
            weight_scale: 0.1,
            temper: None,
            ewc_lambda: 1.0,
            ewc_gamma: 1.0,
            fisher_mode: FisherMode::Empirical,
            fisher_limit: None,
            sgd_lr: 5e-2,
            max_epochs: 200,
            patience: 20,
            lr_patience: 5,
            lr_decay: 1.0 / 3.0,
            min_lr: 1e-4,
            reference: false,
        }
    }
}

impl TrainConfig {
    /// Objective settings for `method`; plain VCL always uses `β = λ = γ = 1`.
    pub fn objective(&self, method: Method) -> GvclConfig {
        let vcl = matches!(method, Method::Vcl | Method::VclFilm);
        GvclConfig {
            beta: if vcl { 1.0 } else { self.beta },
            lambda: if vcl { 1.0 } else { self.lambda },
            gamma: if vcl { 1.0 } else { self.gamma },
            mc_samples: self.mc_samples,
            kl_scale: self.kl_scale,
        }
    }

    pub fn validate(&self, method: Method) -> Result<()> {
        self.objective(method).validate()?;
        if self.batch_size == 0 || self.eval_samples == 0 {
            return Err(Error::Config("batch_size and eval_samples must be positive".into()));
        }
        if !(self.prior_var > 0.0 && self.lr > 0.0 && self.sgd_lr > 0.0) {
            return Err(Error::Config("prior_var and learning rates must be positive".into()));
        }
        if let Some(f) = self.temper {
            if !(f > 0.0) {
                return Err(Error::Config(format!("temper factor {f} must be positive")));
            }
        }
        Ok(())
    }
}

/// Multiplies every posterior variance by `factor`.
pub fn temper_transition(posterior: &DiagGaussian, factor: f64) -> Result<DiagGaussian> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("temper factor {factor} must be positive")));
    }
    temper(posterior, 1.0 / factor)
}

/// Test accuracy plus the per-example confidence of the predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEval {
    pub accuracy: f64,
    pub confidences: Vec<f64>,
    pub correct: Vec<bool>,
}

pub fn evaluate_task(
    net: &VariationalNet,
    task_id: usize,
    data: &Dataset,
    num_samples: usize,
    mode: PredictMode,
    rng: &mut ChaCha8Rng,
) -> Result<TaskEval> {
    let probs = net.predict(task_id, data.inputs(), num_samples, mode, rng)?;
    let mut confidences = Vec::with_capacity(data.len());
    let mut correct = Vec::with_capacity(data.len());
    for (row, &y) in probs.rows().iter().zip(data.labels()) {
        let (arg, conf) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
        confidences.push(conf.clamp(0.0, 1.0));
        correct.push(arg == y);
    }
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    Ok(TaskEval {
        accuracy,
        confidences,
        correct,
    })
}

/// Test accuracy on each of `tasks`.
pub fn evaluate_matrix_row(
    net: &VariationalNet,
    tasks: &[Task],
    num_samples: usize,
    mode: PredictMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|t| evaluate_task(net, t.id, &t.test, num_samples, mode, rng).map(|e| e.accuracy))
        .collect()
}

/// State carried across tasks by one run.
pub struct Learner {
    method: Method,
    cfg: TrainConfig,
    net: VariationalNet,
    prior0: DiagGaussian,
    prior: ClippedPrecisionPrior,
    ewc: EwcState,
    noise_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(method: Method, arch: &Architecture, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate(method)?;
        let init = NetInit {
            logvar: cfg.init_logvar,
            weight_scale: cfg.weight_scale,
        };
        let net = init_net(arch, init, method.film(), seed)?;
        let dim: usize = net.shared_sizes().iter().sum();
        let prior0 = DiagGaussian::isotropic(dim, 0.0, cfg.prior_var)?;
        let prior = ClippedPrecisionPrior::initial(&prior0, cfg.objective(method).lambda)?;
        let ewc = EwcState::new(net.shared_means(), cfg.ewc_lambda, cfg.ewc_gamma);
        Ok(Self {
            method,
            cfg: cfg.clone(),
            net,
            prior0,
            prior,
            ewc,
            noise_rng: seeded_rng(seed, 10),
            shuffle_rng: seeded_rng(seed, 11),
            eval_rng: seeded_rng(seed, 12),
        })
    }

    pub fn net(&self) -> &VariationalNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut VariationalNet {
        &mut self.net
    }

    /// Prior used by the next variational task.
    pub fn prior(&self) -> &ClippedPrecisionPrior {
        &self.prior
    }

    pub fn ewc_state(&self) -> &EwcState {
        &self.ewc
    }

    /// Trains `task` (creating its head and FiLM parameters), then prepares
    /// the regularizer for the next task.
    pub fn train_task(&mut self, task: &Task) -> Result<()> {
        if !self.net.has_task(task.id) {
            self.net.add_task(task.id, task.classes)?;
        }
        if self.method.variational() {
            self.train_variational(task)?;
            let mut posterior = self.net.posterior();
            if let Some(f) = self.cfg.temper {
                posterior = temper_transition(&posterior, f)?;
            }
            let lambda = self.cfg.objective(self.method).lambda;
            self.prior = ClippedPrecisionPrior::new(posterior, self.prior0.var().to_vec(), lambda)?;
        } else {
            self.train_point(task)?;
            if self.method != Method::MapSgd {
                let fisher = self.fisher(task)?;
                self.ewc = ewc_update_state(&self.ewc, &fisher, &self.net.shared_means())?;
            }
        }
        Ok(())
    }

    fn fisher(&self, task: &Task) -> Result<Vec<f64>> {
        let n = task.train.len();
        let used = self.cfg.fisher_limit.map_or(n, |l| l.clamp(1, n));
        let idx: Vec<usize> = (0..used).collect();
        let sub = task.train.select(&idx)?;
        let mut f = fisher_diag(&self.net, task.id, sub.inputs(), sub.labels(), self.cfg.fisher_mode)?;
        if used < n {
            let s = n as f64 / used as f64;
            f.iter_mut().for_each(|v| *v *= s);
        }
        Ok(f)
    }

    fn train_variational(&mut self, task: &Task) -> Result<()> {
        let gcfg = self.cfg.objective(self.method);
        let kl = KlTerms::new(&self.net, &self.prior, gcfg.gamma)?;
        let mut opt = Adam::new(self.cfg.lr);
        let n = task.train.len();
        for epoch in 0..self.cfg.epochs {
            let mut total = 0.0;
            let batches = shuffled_batches(n, self.cfg.batch_size, &mut self.shuffle_rng);
            let count = batches.len();
            for idx in batches {
                let x = task.train.inputs().select_rows(&idx);
                let y: Vec<usize> = idx.iter().map(|&i| task.train.labels()[i]).collect();
                let mut g = Graph::new();
                let b = self.net.bind(&mut g, task.id, ParamMode::Variational)?;
                let nodes = beta_elbo_loss(&mut g, &self.net, &b, &x, &y, &kl, &gcfg, n, &mut self.noise_rng)?;
                total += g.value(nodes.loss).item();
                let grads = g.backward(nodes.loss)?;
                let ids = b.trainable();
                let gs: Vec<Option<&Tensor>> = ids.iter().map(|&id| grads.get(id)).collect();
                let mut params = self.net.trainable_mut(task.id, ParamMode::Variational)?;
                opt.step(&mut params, &gs)?;
            }
            log::debug!(
                "{} task {} epoch {epoch}: mean loss {:.5}",
                self.method.name(),
                task.id,
                total / count as f64
            );
        }
        Ok(())
    }

    fn point_loss(&self, g: &mut Graph, task: &Task, x: &Tensor, y: &[usize], mode: ParamMode) -> Result<(NodeId, Binding)> {
        let b = self.net.bind(g, task.id, mode)?;
        let xn = g.constant(x.clone());
        let logits = self.net.forward(g, &b, xn, &mut Noise::Zero)?;
        let nll = g.softmax_cross_entropy(logits, y)?;
        if self.method == Method::MapSgd {
            return Ok((nll, b));
        }
        let loss = ewc_loss(g, &b, nll, &self.ewc, task.train.len())?;
        Ok((loss, b))
    }

    fn validation_loss(&self, task: &Task) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.point_loss(&mut g, task, task.val.inputs(), task.val.labels(), ParamMode::Frozen)?;
        Ok(g.value(loss).item())
    }

    fn train_point(&mut self, task: &Task) -> Result<()> {
        let mut opt = Sgd::new(self.cfg.sgd_lr);
        let n = task.train.len();
        let mut best = (self.validation_loss(task)?, self.net.clone());
        let (mut since_best, mut since_decay) = (0, 0);
        for epoch in 0..self.cfg.max_epochs {
            for idx in shuffled_batches(n, self.cfg.batch_size, &mut self.shuffle_rng) {
                let x = task.train.inputs().select_rows(&idx);
                let y: Vec<usize> = idx.iter().map(|&i| task.train.labels()[i]).collect();
                let mut g = Graph::new();
                let (loss, b) = self.point_loss(&mut g, task, &x, &y, ParamMode::MeanOnly)?;
                let grads = g.backward(loss)?;
                let ids = b.trainable();
                let gs: Vec<Option<&Tensor>> = ids.iter().map(|&id| grads.get(id)).collect();
                let mut params = self.net.trainable_mut(task.id, ParamMode::MeanOnly)?;
                opt.step(&mut params, &gs)?;
            }
            let val = self.validation_loss(task)?;
            log::debug!("{} task {} epoch {epoch}: validation loss {val:.5}", self.method.name(), task.id);
            if val < best.0 {
                best = (val, self.net.clone());
                since_best = 0;
                since_decay = 0;
            } else {
                since_best += 1;
                since_decay += 1;
                if since_decay >= self.cfg.lr_patience {
                    opt.decay(self.cfg.lr_decay);
                    since_decay = 0;
                }
                if since_best >= self.cfg.patience || opt.lr() < self.cfg.min_lr {
                    break;
                }
            }
        }
        self.net = best.1;
        Ok(())
    }

    fn eval_mode(&self) -> PredictMode {
        if self.method.variational() {
            self.cfg.eval_mode
        } else {
            PredictMode::Mean
        }
    }

    pub fn evaluate(&mut self, tasks: &[Task]) -> Result<Vec<TaskEval>> {
        let mode = self.eval_mode();
        tasks
            .iter()
            .map(|t| evaluate_task(&self.net, t.id, &t.test, self.cfg.eval_samples, mode, &mut self.eval_rng))
            .collect()
    }
}

/// Output of one method × seed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub config: TrainConfig,
    pub architecture: Architecture,
    pub matrix: ResultMatrix,
    /// Calibration of the final row, pooled over all tasks.
    pub calibration: Vec<CalibrationBin>,
    pub ece: Option<f64>,
    pub task_seconds: Vec<f64>,
    pub checkpoints: Vec<String>,
    pub error: Option<String>,
}

impl RunRecord {
    /// Equality ignoring wall-clock timings.
    pub fn same_results(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            task_seconds: Vec::new(),
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// Where per-task checkpoints go, if anywhere.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
}

/// Trains `method` through `tasks` in order. A failing task ends the run
/// early; the partial matrix and the error are recorded.
pub fn run_continual(
    method: Method,
    tasks: &TaskSequence,
    arch: &Architecture,
    cfg: &TrainConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunRecord> {
    let mut learner = Learner::new(method, arch, cfg, seed)?;
    let mut rows = Vec::new();
    let mut seconds = Vec::new();
    let mut checkpoints = Vec::new();
    let mut calibration = Vec::new();
    let mut final_ece = None;
    let mut error = None;
    let all = tasks.tasks();
    for (i, task) in all.iter().enumerate() {
        let start = Instant::now();
        let step = learner.train_task(task).and_then(|()| learner.evaluate(&all[..=i]));
        seconds.push(start.elapsed().as_secs_f64());
        let evals = match step {
            Ok(e) => e,
            Err(e) => {
                log::error!("{} seed {seed}: task {} failed: {e}", method.name(), task.id);
                error = Some(format!("task {}: {e}", task.id));
                break;
            }
        };
        rows.push(evals.iter().map(|e| e.accuracy).collect());
        if i + 1 == all.len() {
            let conf: Vec<f64> = evals.iter().flat_map(|e| e.confidences.iter().copied()).collect();
            let ok: Vec<bool> = evals.iter().flat_map(|e| e.correct.iter().copied()).collect();
            calibration = calibration_bins(&conf, &ok, DEFAULT_ECE_BINS)?;
            final_ece = Some(ece(&conf, &ok, DEFAULT_ECE_BINS)?);
        }
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("task{}.json", task.id));
            learner.net().save(&path)?;
            checkpoints.push(path.display().to_string());
        }
    }
    let independent = if cfg.reference && error.is_none() {
        let mut ind = Vec::with_capacity(all.len());
        for task in all {
            let mut solo = Learner::new(method, arch, cfg, seed)?;
            solo.train_task(task)?;
            ind.push(solo.evaluate(std::slice::from_ref(task))?[0].accuracy);
        }
        Some(ind)
    } else {
        None
    };
    Ok(RunRecord {
        method,
        seed,
        config: cfg.clone(),
        architecture: arch.clone(),
        matrix: ResultMatrix::new(rows, independent)?,
        calibration,
        ece: final_ece,
        task_seconds: seconds,
        checkpoints,
        error,
    })
}
