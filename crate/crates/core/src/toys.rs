//! Small synthetic experiments: the curvature probe sweep, convergence of
//! tempered sequential VI to Online EWC on a 2-D logistic model, the FiLM
//! scale optimum, and unit pruning with and without FiLM.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic_tasks, gen_toy_clusters, Dataset};
use crate::error::{Error, Result};
use crate::experiment::write_csv;
use crate::gaussian::{film_optimal_scale, film_scaled_kl, film_scaled_kl_curvature, DiagGaussian};
use crate::linalg::SymMatrix;
use crate::net::{seeded_rng, Architecture};
use crate::objectives::{curvature_probe, CurvatureFn};
use crate::runner::{Learner, Method, TrainConfig};

pub const CURVATURE_BETAS: [f64; 3] = [0.1, 1.0, 10.0];

/// One `(β, f, seed)` point of the curvature sweep. A failed fit keeps its
/// row with the error message and NaN estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRow {
    pub beta: f64,
    pub function: String,
    pub seed: u64,
    pub mu: f64,
    pub var: f64,
    pub effective_var: f64,
    pub error: Option<String>,
}

pub fn curvature_sweep(betas: &[f64], functions: &[CurvatureFn], seeds: &[u64]) -> Vec<CurvatureRow> {
    let mut rows = Vec::new();
    for &which in functions {
        for &beta in betas {
            for &seed in seeds {
                let row = match curvature_probe(beta, which, seed) {
                    Ok(fit) => CurvatureRow {
                        beta,
                        function: which.name().into(),
                        seed,
                        mu: fit.mu,
                        var: fit.var,
                        effective_var: fit.effective_var,
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("curvature {} β={beta} seed {seed}: {e}", which.name());
                        CurvatureRow {
                            beta,
                            function: which.name().into(),
                            seed,
                            mu: f64::NAN,
                            var: f64::NAN,
                            effective_var: f64::NAN,
                            error: Some(e.to_string()),
                        }
                    }
                };
                rows.push(row);
            }
        }
    }
    rows
}

/// Mean effective variance of `function` at `beta` over the successful rows.
pub fn mean_effective_var(rows: &[CurvatureRow], function: CurvatureFn, beta: f64) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.function == function.name() && r.beta == beta && r.error.is_none())
        .map(|r| r.effective_var)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Probabilists' Gauss–Hermite rule from the eigen-decomposition of the
/// Jacobi matrix; weights sum to one.
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let mut m = vec![0.0; n * n];
    for k in 1..n {
        let b = (k as f64).sqrt();
        m[(k - 1) * n + k] = b;
        m[k * n + k - 1] = b;
    }
    let (values, vectors) = SymMatrix::new(n, m).expect("square").symmetric_eigen();
    let mut rule: Vec<(f64, f64)> = values.into_iter().zip(vectors).map(|(x, v)| (x, v[0] * v[0])).collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

pub const CONVERGENCE_BETAS: [f64; 4] = [1.0, 0.3, 0.1, 0.03];
/// Cluster spread for the convergence experiment: wide enough that neither
/// task is linearly separable, so the unregularized fit is finite.
pub const CONVERGENCE_SPREAD: f64 = 1.2;
pub const CONVERGENCE_POINTS: usize = 100;

const HERMITE_NODES: usize = 48;

fn log_sigmoid(a: f64) -> f64 {
    -(if a > 0.0 { (-a).exp().ln_1p() } else { -a + a.exp().ln_1p() })
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression on 2-D inputs with parameters `(w₁, w₂, b)`.
struct Logistic<'a> {
    rows: Vec<[f64; 3]>,
    labels: &'a [usize],
    rule: &'a [(f64, f64)],
}

/// `Σₙ E[ℓₙ]`, `Σₙ E[ℓ′ₙ] x̃ₙ`, `Σₙ E[ℓ″ₙ] x̃ₙx̃ₙᵀ` under `θ ~ N(μ, diag var)`.
struct Expectations {
    value: f64,
    grad: [f64; 3],
    hess: [[f64; 3]; 3],
}

impl<'a> Logistic<'a> {
    fn new(data: &'a Dataset, rule: &'a [(f64, f64)]) -> Self {
        let rows = data.inputs().rows().iter().map(|r| [r[0], r[1], 1.0]).collect();
        Self {
            rows,
            labels: data.labels(),
            rule,
        }
    }

    fn expectations(&self, mu: &[f64; 3], var: &[f64; 3]) -> Expectations {
        let mut e = Expectations {
            value: 0.0,
            grad: [0.0; 3],
            hess: [[0.0; 3]; 3],
        };
        for (x, &y) in self.rows.iter().zip(self.labels) {
            let m: f64 = (0..3).map(|i| x[i] * mu[i]).sum();
            let s = (0..3).map(|i| x[i] * x[i] * var[i]).sum::<f64>().sqrt();
            let sign = if y == 1 { 1.0 } else { -1.0 };
            let (mut l, mut d1, mut d2) = (0.0, 0.0, 0.0);
            for &(z, w) in self.rule {
                let a = m + s * z;
                let p = sigmoid(a);
                l += w * log_sigmoid(sign * a);
                d1 += w * (y as f64 - p);
                d2 -= w * p * (1.0 - p);
            }
            e.value += l;
            for i in 0..3 {
                e.grad[i] += d1 * x[i];
                for j in 0..3 {
                    e.hess[i][j] += d2 * x[i] * x[j];
                }
            }
        }
        e
    }
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Result<[f64; 3]> {
    let m = SymMatrix::new(3, a.iter().flatten().copied().collect())?;
    let inv = m.inverse()?;
    Ok(std::array::from_fn(|i| (0..3).map(|j| inv.get(i, j) * b[j]).sum()))
}

/// Maximizes `E_q[log p(D|θ)] − β·KL(q ‖ prior)` over diagonal Gaussians `q`
/// by alternating exact Newton steps on the mean with the variance fixed
/// point `1/σᵢ² = 1/pvᵢ − (1/β) Σₙ E[ℓ″ₙ] x̃ₙᵢ²`.
pub fn fit_tempered_logistic(data: &Dataset, prior: &DiagGaussian, beta: f64) -> Result<DiagGaussian> {
    if prior.dim() != 3 || data.features() != 2 {
        return Err(Error::InvalidArgument("logistic toy needs 2 features and a 3-D prior".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} must be positive")));
    }
    let rule = gauss_hermite(HERMITE_NODES);
    let model = Logistic::new(data, &rule);
    let (pm, pv) = (prior.mu(), prior.var());
    let mut mu: [f64; 3] = std::array::from_fn(|i| pm[i]);
    let mut var: [f64; 3] = std::array::from_fn(|i| pv[i]);
    let objective = |mu: &[f64; 3], var: &[f64; 3]| {
        let e = model.expectations(mu, var);
        e.value - 0.5 * beta * (0..3).map(|i| (mu[i] - pm[i]).powi(2) / pv[i]).sum::<f64>()
    };
    for _ in 0..10_000 {
        let e = model.expectations(&mu, &var);
        let grad: [f64; 3] = std::array::from_fn(|i| e.grad[i] - beta * (mu[i] - pm[i]) / pv[i]);
        let mut neg_hess = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                neg_hess[i][j] = -e.hess[i][j];
            }
            neg_hess[i][i] += beta / pv[i];
        }
        let step = solve3(neg_hess, grad)?;
        let base = objective(&mu, &var);
        let mut t = 1.0;
        let mut next = mu;
        while t > 1e-10 {
            next = std::array::from_fn(|i| mu[i] + t * step[i]);
            if objective(&next, &var) >= base - 1e-12 * base.abs() {
                break;
            }
            t *= 0.5;
        }
        let e = model.expectations(&next, &var);
        let new_var: [f64; 3] = std::array::from_fn(|i| 1.0 / (1.0 / pv[i] - e.hess[i][i] / beta));
        let dmu = (0..3).map(|i| (next[i] - mu[i]).abs()).fold(0.0, f64::max);
        let dvar = (0..3).map(|i| ((new_var[i] - var[i]) / var[i]).abs()).fold(0.0, f64::max);
        mu = next;
        var = new_var;
        if !mu.iter().chain(&var).all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("logistic fit at β={beta} left the finite range")));
        }
        if dmu < 1e-12 && dvar < 1e-12 {
            return DiagGaussian::new(mu.to_vec(), var.to_vec());
        }
    }
    Err(Error::Divergence(format!("logistic fit at β={beta} did not converge")))
}

/// Maximizes `log p(D|θ) − ½ Σᵢ Fᵢ (θᵢ − aᵢ)²` by Newton's method; returns
/// `θ` and the diagonal of the negative log-likelihood Hessian at `θ`.
pub fn fit_penalized_logistic(data: &Dataset, anchor: &[f64; 3], fisher: &[f64; 3]) -> Result<([f64; 3], [f64; 3])> {
    let rule = [(0.0, 1.0)];
    let model = Logistic::new(data, &rule);
    let zero = [0.0; 3];
    let objective = |t: &[f64; 3]| {
        model.expectations(t, &zero).value - 0.5 * (0..3).map(|i| fisher[i] * (t[i] - anchor[i]).powi(2)).sum::<f64>()
    };
    let mut theta = *anchor;
    for _ in 0..500 {
        let e = model.expectations(&theta, &zero);
        let grad: [f64; 3] = std::array::from_fn(|i| e.grad[i] - fisher[i] * (theta[i] - anchor[i]));
        let mut neg_hess = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                neg_hess[i][j] = -e.hess[i][j];
            }
            neg_hess[i][i] += fisher[i];
        }
        let step = solve3(neg_hess, grad)?;
        let base = objective(&theta);
        let mut t = 1.0;
        let mut next = theta;
        while t > 1e-10 {
            next = std::array::from_fn(|i| theta[i] + t * step[i]);
            if objective(&next) >= base - 1e-12 * base.abs() {
                break;
            }
            t *= 0.5;
        }
        let moved = (0..3).map(|i| (next[i] - theta[i]).abs()).fold(0.0, f64::max);
        theta = next;
        if !theta.iter().all(|v| v.is_finite()) || theta.iter().any(|v| v.abs() > 1e6) {
            return Err(Error::Divergence("penalized logistic fit diverged; data may be separable".into()));
        }
        if moved < 1e-13 {
            let e = model.expectations(&theta, &zero);
            return Ok((theta, std::array::from_fn(|i| -e.hess[i][i])));
        }
    }
    Err(Error::Divergence("penalized logistic fit did not converge".into()))
}

/// Distance after task 2 between the tempered sequential VI means and the
/// Online EWC solution, for one seed and `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub seed: u64,
    pub beta: f64,
    pub distance: f64,
    pub vi_mean: Vec<f64>,
    pub ewc_mean: Vec<f64>,
    pub error: Option<String>,
}

/// Online EWC on the two cluster tasks: unregularized fit on task 1, then a
/// fit on task 2 penalized by the task-1 Hessian diagonal.
pub fn ewc_reference(seed: u64) -> Result<[f64; 3]> {
    let tasks = gen_toy_clusters(seed, CONVERGENCE_POINTS, CONVERGENCE_SPREAD)?;
    let t = tasks.tasks();
    let (theta1, f1) = fit_penalized_logistic(&t[0].train, &[0.0; 3], &[0.0; 3])?;
    let (theta2, _) = fit_penalized_logistic(&t[1].train, &theta1, &f1)?;
    Ok(theta2)
}

/// Sequential tempered VI (λ = 1) from a unit normal prior; the task-1
/// posterior is the task-2 prior.
pub fn tempered_sequence(seed: u64, beta: f64) -> Result<DiagGaussian> {
    let tasks = gen_toy_clusters(seed, CONVERGENCE_POINTS, CONVERGENCE_SPREAD)?;
    let t = tasks.tasks();
    let q1 = fit_tempered_logistic(&t[0].train, &DiagGaussian::isotropic(3, 0.0, 1.0)?, beta)?;
    fit_tempered_logistic(&t[1].train, &q1, beta)
}

pub fn ewc_convergence(seeds: &[u64], betas: &[f64]) -> Vec<ConvergenceRow> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let reference = ewc_reference(seed);
        for &beta in betas {
            let outcome = reference.as_ref().map_err(|e| e.to_string()).and_then(|r| {
                tempered_sequence(seed, beta).map(|q| (*r, q)).map_err(|e| e.to_string())
            });
            rows.push(match outcome {
                Ok((r, q)) => ConvergenceRow {
                    seed,
                    beta,
                    distance: q.mu().iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
                    vi_mean: q.mu().to_vec(),
                    ewc_mean: r.to_vec(),
                    error: None,
                },
                Err(e) => {
                    log::warn!("convergence seed {seed} β={beta}: {e}");
                    ConvergenceRow {
                        seed,
                        beta,
                        distance: f64::NAN,
                        vi_mean: Vec::new(),
                        ewc_mean: Vec::new(),
                        error: Some(e),
                    }
                }
            });
        }
    }
    rows
}

/// Mean distance per `β`, in the order given.
pub fn mean_distances(rows: &[ConvergenceRow], betas: &[f64]) -> Vec<f64> {
    betas
        .iter()
        .map(|&b| {
            let d: Vec<f64> = rows.iter().filter(|r| r.beta == b).map(|r| r.distance).collect();
            d.iter().sum::<f64>() / d.len().max(1) as f64
        })
        .collect()
}

/// A random `(q, prior)` pair for the FiLM scale experiment.
pub fn random_film_instance(seed: u64, dim: usize) -> Result<(DiagGaussian, DiagGaussian)> {
    let mut rng = seeded_rng(seed, 400);
    let mut draw = |n: usize, f: &dyn Fn(f64) -> f64| -> Vec<f64> {
        (0..n).map(|_| f(rng.sample::<f64, _>(StandardNormal))).collect()
    };
    let qm = draw(dim, &|z| z);
    let qv = draw(dim, &|z| (0.5 * z).exp());
    let pm = draw(dim, &|z| 0.5 * z);
    let pv = draw(dim, &|z| (0.5 * z).exp());
    Ok((DiagGaussian::new(qm, qv)?, DiagGaussian::new(pm, pv)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmScaleRow {
    pub c: f64,
    pub kl: f64,
    pub c_star: f64,
}

/// `KL(c)` over `c = step, 2·step, …, hi`, each row carrying the analytic `c*`.
pub fn film_scale_grid(q: &DiagGaussian, prior: &DiagGaussian, step: f64, hi: f64) -> Result<Vec<FilmScaleRow>> {
    if !(step > 0.0 && hi > step) {
        return Err(Error::InvalidArgument(format!("grid step {step} up to {hi}")));
    }
    let c_star = film_optimal_scale(q, prior)?;
    let n = (hi / step).round() as usize;
    (1..=n)
        .map(|k| {
            let c = k as f64 * step;
            Ok(FilmScaleRow {
                c,
                kl: film_scaled_kl(q, prior, c)?,
                c_star,
            })
        })
        .collect()
}

/// Grid point with the smallest KL.
pub fn grid_argmin(rows: &[FilmScaleRow]) -> Option<f64> {
    rows.iter().min_by(|a, b| a.kl.total_cmp(&b.kl)).map(|r| r.c)
}

/// Checks one random instance: the grid argmin lies within one step of `c*`
/// and the curvature at `c*` is positive.
pub fn film_scale_check(seed: u64, dim: usize, step: f64) -> Result<bool> {
    let (q, prior) = random_film_instance(seed, dim)?;
    let c_star = film_optimal_scale(&q, &prior)?;
    let rows = film_scale_grid(&q, &prior, step, (2.0 * c_star).max(3.0))?;
    let near = grid_argmin(&rows).is_some_and(|c| (c - c_star).abs() <= step + 1e-12);
    Ok(near && film_scaled_kl_curvature(&q, &prior, c_star)? > 0.0)
}

/// Setup for the pruning experiment. Units are counted in the first shared
/// layer, which no head can switch off directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningSetup {
    pub features: usize,
    pub hidden: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub tasks: usize,
    pub threshold: f64,
    pub config: TrainConfig,
}

impl Default for PruningSetup {
    fn default() -> Self {
        Self {
            features: 10,
            hidden: vec![50, 50],
            n_train: 1000,
            n_test: 500,
            tasks: 2,
            threshold: 0.1,
            config: TrainConfig {
                epochs: 300,
                lr: 1e-2,
                init_logvar: -6.0,
                eval_samples: 20,
                ..TrainConfig::default()
            },
        }
    }
}

/// Diagnostics of one unit, taken right after `task` was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningUnit {
    pub seed: u64,
    pub film: bool,
    pub task: usize,
    pub layer: usize,
    pub unit: usize,
    pub score: f64,
    pub bias_mean: f64,
}

/// One trained sequence with or without FiLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningArm {
    /// First-layer active units after each task.
    pub active: Vec<usize>,
    /// First-layer units above threshold whose effective bias is negative
    /// for the last task.
    pub active_negative_bias: usize,
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningRun {
    pub seed: u64,
    pub film: PruningArm,
    pub plain: PruningArm,
    pub units: Vec<PruningUnit>,
}

impl PruningRun {
    pub fn film_not_fewer(&self) -> bool {
        self.film.active.last() >= self.plain.active.last()
    }
}

/// Trains GVCL with and without FiLM on the same synthetic sequence and
/// counts first-layer units whose incoming weights moved away from the
/// prior.
pub fn pruning_pair(setup: &PruningSetup, seed: u64) -> Result<PruningRun> {
    let tasks = gen_synthetic_tasks(seed, setup.tasks, setup.features, setup.n_train, setup.n_test)?;
    let arch = Architecture::Mlp {
        input: setup.features,
        hidden: setup.hidden.clone(),
    };
    let mut units = Vec::new();
    let mut arms = Vec::with_capacity(2);
    for method in [Method::Gvcl, Method::GvclFilm] {
        let mut learner = Learner::new(method, &arch, &setup.config, seed)?;
        let dim: usize = learner.net().shared_sizes().iter().sum();
        let prior0 = DiagGaussian::isotropic(dim, 0.0, setup.config.prior_var)?;
        let mut active = Vec::with_capacity(tasks.len());
        let mut negative = 0;
        for task in tasks.tasks() {
            learner.train_task(task)?;
            let diag = learner.net().prune_diagnostics(&prior0, task.id)?;
            active.push(diag[0].active(setup.threshold));
            negative = diag[0]
                .score
                .iter()
                .zip(&diag[0].bias_mean)
                .filter(|(&s, &b)| s > setup.threshold && b < 0.0)
                .count();
            for (layer, d) in diag.iter().enumerate() {
                for (unit, (&score, &bias_mean)) in d.score.iter().zip(&d.bias_mean).enumerate() {
                    units.push(PruningUnit {
                        seed,
                        film: method.film(),
                        task: task.id,
                        layer,
                        unit,
                        score,
                        bias_mean,
                    });
                }
            }
        }
        let accuracy = learner.evaluate(tasks.tasks())?.iter().map(|e| e.accuracy).collect();
        arms.push(PruningArm {
            active,
            active_negative_bias: negative,
            accuracy,
        });
    }
    let film = arms.pop().expect("two arms");
    let plain = arms.pop().expect("two arms");
    Ok(PruningRun { seed, film, plain, units })
}

/// The toy experiments exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toy {
    Curvature,
    EwcConvergence,
    FilmScale,
    Pruning,
}

impl Toy {
    pub const ALL: [Toy; 4] = [Toy::Curvature, Toy::EwcConvergence, Toy::FilmScale, Toy::Pruning];

    pub fn name(self) -> &'static str {
        match self {
            Toy::Curvature => "curvature",
            Toy::EwcConvergence => "ewc-convergence",
            Toy::FilmScale => "film-scale",
            Toy::Pruning => "pruning",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|t| t.name()).collect();
            Error::InvalidArgument(format!("unknown toy {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvergenceCsvRow {
    seed: u64,
    beta: f64,
    distance: f64,
    vi_w0: f64,
    vi_w1: f64,
    vi_b: f64,
    ewc_w0: f64,
    ewc_w1: f64,
    ewc_b: f64,
    error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FilmScaleCsvRow {
    instance: u64,
    c: f64,
    kl: f64,
    c_star: f64,
}

pub const TOY_SEEDS: u64 = 5;
pub const FILM_INSTANCES: u64 = 100;
pub const FILM_DIM: usize = 8;
pub const FILM_GRID_STEP: f64 = 0.01;

/// Runs one toy, writes `<out>/toys/<name>.csv`, and returns the file path
/// with a short text summary. Failed points are kept as rows.
pub fn run_toy(toy: Toy, out: &Path) -> Result<(PathBuf, String)> {
    let path = out.join("toys").join(format!("{}.csv", toy.name()));
    let summary = match toy {
        Toy::Curvature => {
            let fns = [CurvatureFn::F1, CurvatureFn::F2, CurvatureFn::F3, CurvatureFn::Linear];
            let rows = curvature_sweep(&CURVATURE_BETAS, &fns, &[0, 1, 2]);
            write_csv(&path, &rows)?;
            let mut s = String::from("mean effective variance by beta 0.1 / 1 / 10:");
            for f in fns {
                let v: Vec<String> = CURVATURE_BETAS
                    .iter()
                    .map(|&b| mean_effective_var(&rows, f, b).map_or("failed".into(), |v| format!("{v:.4}")))
                    .collect();
                s.push_str(&format!("\n  {:<7} {}", f.name(), v.join(" / ")));
            }
            s
        }
        Toy::EwcConvergence => {
            let seeds: Vec<u64> = (0..TOY_SEEDS).collect();
            let rows = ewc_convergence(&seeds, &CONVERGENCE_BETAS);
            let flat: Vec<ConvergenceCsvRow> = rows
                .iter()
                .map(|r| {
                    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(f64::NAN);
                    ConvergenceCsvRow {
                        seed: r.seed,
                        beta: r.beta,
                        distance: r.distance,
                        vi_w0: at(&r.vi_mean, 0),
                        vi_w1: at(&r.vi_mean, 1),
                        vi_b: at(&r.vi_mean, 2),
                        ewc_w0: at(&r.ewc_mean, 0),
                        ewc_w1: at(&r.ewc_mean, 1),
                        ewc_b: at(&r.ewc_mean, 2),
                        error: r.error.clone(),
                    }
                })
                .collect();
            write_csv(&path, &flat)?;
            let means = mean_distances(&rows, &CONVERGENCE_BETAS);
            let parts: Vec<String> = CONVERGENCE_BETAS
                .iter()
                .zip(&means)
                .map(|(b, d)| format!("beta {b}: {d:.4}"))
                .collect();
            format!("mean distance to the Online EWC solution: {}", parts.join(", "))
        }
        Toy::FilmScale => {
            let mut rows = Vec::new();
            let mut matched = 0;
            for instance in 0..FILM_INSTANCES {
                let (q, prior) = random_film_instance(instance, FILM_DIM)?;
                let c_star = film_optimal_scale(&q, &prior)?;
                let grid = film_scale_grid(&q, &prior, FILM_GRID_STEP, (2.0 * c_star).max(3.0))?;
                if grid_argmin(&grid).is_some_and(|c| (c - c_star).abs() <= FILM_GRID_STEP + 1e-12) {
                    matched += 1;
                }
                rows.extend(grid.into_iter().map(|r| FilmScaleCsvRow {
                    instance,
                    c: r.c,
                    kl: r.kl,
                    c_star: r.c_star,
                }));
            }
            write_csv(&path, &rows)?;
            format!("grid argmin within one step of c* on {matched}/{FILM_INSTANCES} instances")
        }
        Toy::Pruning => {
            let setup = PruningSetup::default();
            let mut units = Vec::new();
            let mut lines = Vec::new();
            for seed in 0..TOY_SEEDS {
                let run = pruning_pair(&setup, seed)?;
                lines.push(format!(
                    "seed {seed}: active first-layer units with FiLM {:?}, without {:?}",
                    run.film.active, run.plain.active
                ));
                units.extend(run.units);
            }
            write_csv(&path, &units)?;
            lines.join("\n")
        }
    };
    Ok((path, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_integrates_gaussian_moments() {
        let rule = gauss_hermite(20);
        let m = |k: i32| rule.iter().map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12);
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn tempered_fit_is_stationary() {
        let tasks = gen_toy_clusters(3, CONVERGENCE_POINTS, CONVERGENCE_SPREAD).unwrap();
        let data = &tasks.tasks()[0].train;
        let prior = DiagGaussian::isotropic(3, 0.0, 1.0).unwrap();
        let q = fit_tempered_logistic(data, &prior, 0.3).unwrap();
        let rule = gauss_hermite(HERMITE_NODES);
        let model = Logistic::new(data, &rule);
        let mu: [f64; 3] = std::array::from_fn(|i| q.mu()[i]);
        let var: [f64; 3] = std::array::from_fn(|i| q.var()[i]);
        let e = model.expectations(&mu, &var);
        for i in 0..3 {
            assert!((e.grad[i] - 0.3 * mu[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn film_grid_contains_optimum() {
        for seed in 0..5 {
            assert!(film_scale_check(seed, 4, 0.01).unwrap());
        }
    }
}
