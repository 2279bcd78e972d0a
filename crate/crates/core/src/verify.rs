//! Property checks run by the `verify` command.
//!
//! Each check is a pure function returning a one-line summary on success or
//! a description of the first violation. The Gaussian checks take the KL
//! implementation as an argument so a deliberately broken one can be fed in.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{DiagKlConstants, Graph, NodeId};
use crate::data::{gen_synthetic_tasks, gen_toy_clusters, load_idx, write_idx};
use crate::error::Result;
use crate::experiment::{record_path, ExperimentConfig};
use crate::gaussian::{
    diag_approx_by_precision, film_optimal_scale, film_scaled_kl_curvature, film_scaled_kl_derivative, kl_diag,
    kl_lambda, kl_lambda_tilde, low_rank_select, temper, ClippedPrecisionPrior, DiagGaussian,
};
use crate::linalg::SymMatrix;
use crate::metrics::{acc, bwt, delta_acc, ece, fwt, ResultMatrix};
use crate::net::{init_net, seeded_rng, Architecture, NetInit, Noise, ParamMode, VariationalNet};
use crate::objectives::{beta_elbo_loss, ewc_loss, EwcState, GvclConfig, KlTerms};
use crate::runner::{run_continual, Learner, Method, RunOptions, TrainConfig};
use crate::tensor::Tensor;

/// A KL divergence between diagonal Gaussians.
pub type KlFn = fn(&DiagGaussian, &DiagGaussian) -> Result<f64>;

/// `Ok(summary)` or `Err(first violation)`.
pub type CheckResult = std::result::Result<String, String>;

pub struct Check {
    pub name: &'static str,
    run: Box<dyn Fn() -> CheckResult + Send + Sync>,
}

impl Check {
    pub fn new(name: &'static str, run: impl Fn() -> CheckResult + Send + Sync + 'static) -> Self {
        Self { name, run: Box::new(run) }
    }

    pub fn run(&self) -> CheckOutcome {
        let start = Instant::now();
        let result = (self.run)();
        CheckOutcome {
            name: self.name.to_string(),
            passed: result.is_ok(),
            detail: result.unwrap_or_else(|e| e),
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// The full suite with the library KL.
pub fn suite() -> Vec<Check> {
    suite_with_kl(kl_diag)
}

pub fn suite_with_kl(kl: KlFn) -> Vec<Check> {
    vec![
        Check::new("autodiff.finite_differences", || gradient_check(20)),
        Check::new("autodiff.forward_determinism", forward_determinism),
        Check::new("gaussian.kl_nonnegative", move || kl_nonnegative(kl, 500)),
        Check::new("gaussian.tempering_identity", move || tempering_identity(kl, 1000)),
        Check::new("gaussian.clipped_prior_reductions", move || clipped_prior_reductions(kl, 200)),
        Check::new("gaussian.diag_precision_matching", || diag_precision_matching(50)),
        Check::new("gaussian.low_rank_exhaustive", || low_rank_exhaustive(100)),
        Check::new("gaussian.film_scale_root", || film_scale_root(200)),
        Check::new("net.film_identity", film_identity),
        Check::new("net.task_isolation", task_isolation),
        Check::new("net.sampled_likelihood_gradient", sampled_likelihood_gradient),
        Check::new("net.kl_additivity", kl_additivity),
        Check::new("objectives.vcl_elbo_reduction", vcl_elbo_reduction),
        Check::new("objectives.kl_ignores_film", kl_ignores_film),
        Check::new("objectives.ewc_constant_shift", ewc_constant_shift),
        Check::new("runner.vcl_equals_unit_gvcl", vcl_equals_unit_gvcl),
        Check::new("runner.prior_chain", prior_chain),
        Check::new("runner.determinism", run_determinism),
        Check::new("runner.film_freshness", film_freshness),
        Check::new("data.idx_rejects_inconsistent", idx_rejects_inconsistent),
        Check::new("data.generators_pure", generators_pure),
        Check::new("metrics.task_relabelling", || metric_relabelling(200)),
        Check::new("metrics.ece_range_and_calibration", ece_range_and_calibration),
        Check::new("experiment.config_round_trip", config_round_trip),
        Check::new("experiment.output_layout", output_layout),
    ]
}

pub fn run_suite(checks: &[Check]) -> Vec<CheckOutcome> {
    checks.iter().map(Check::run).collect()
}

/// Fixed-width table, one row per check, followed by a totals line.
pub fn render_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:<6}  {:>9}  detail\n", "check", "status", "seconds");
    for o in outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:<width$}  {:<6}  {:>9.3}  {}\n", o.name, status, o.seconds, o.detail));
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let total: f64 = outcomes.iter().map(|o| o.seconds).sum();
    s.push_str(&format!("{} passed, {failed} failed in {total:.2}s\n", outcomes.len() - failed));
    s
}

fn e2s(e: crate::error::Error) -> String {
    e.to_string()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
    let mu = (0..d).map(|_| uniform(rng, -2.0, 2.0)).collect();
    let var = (0..d).map(|_| uniform(rng, 0.1, 3.0)).collect();
    DiagGaussian::new(mu, var).expect("positive variances")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------- autodiff

type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Builder,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| uniform(rng, lo, hi)).collect()).expect("shape matches")
}

/// Values in `[-2, 2]` bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = uniform(rng, 0.05, 2.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Distinct values in `[-2, 2]` at least 0.01 apart, so max pooling has no
/// near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut grid: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * (i as f64 + 0.5) / n as f64).collect();
    for i in (1..n).rev() {
        grid.swap(i, rng.random_range(0..=i));
    }
    let jitter = 0.4 / n as f64;
    Tensor::new(shape.to_vec(), grid.into_iter().map(|v| v + uniform(rng, -jitter, jitter)).collect())
        .expect("shape matches")
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases = Vec::new();
    let mut case = |name, inputs, build: Builder| cases.push(OpCase { name, inputs, build });
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| random_tensor(rng, s, -2.0, 2.0);

    case("add", vec![r(rng, &[3, 4]), r(rng, &[3, 4])], Box::new(|g, p| g.add(p[0], p[1])));
    case("sub", vec![r(rng, &[3, 4]), r(rng, &[3, 4])], Box::new(|g, p| g.sub(p[0], p[1])));
    case("mul", vec![r(rng, &[3, 4]), r(rng, &[3, 4])], Box::new(|g, p| g.mul(p[0], p[1])));
    let c = uniform(rng, -2.0, 2.0);
    case("scale", vec![r(rng, &[5])], Box::new(move |g, p| g.scale(p[0], c)));
    case("relu", vec![away_from_zero(rng, &[3, 4])], Box::new(|g, p| g.relu(p[0])));
    case("sigmoid", vec![r(rng, &[6])], Box::new(|g, p| g.sigmoid(p[0])));
    case("log", vec![random_tensor(rng, &[6], 0.1, 2.0)], Box::new(|g, p| g.log(p[0])));
    case("exp", vec![r(rng, &[6])], Box::new(|g, p| g.exp(p[0])));
    case("square", vec![r(rng, &[6])], Box::new(|g, p| g.square(p[0])));
    case("sum", vec![r(rng, &[2, 3])], Box::new(|g, p| g.sum(p[0])));
    case("mean", vec![r(rng, &[2, 3])], Box::new(|g, p| g.mean(p[0])));
    case("reshape", vec![r(rng, &[2, 6])], Box::new(|g, p| g.reshape(p[0], &[3, 4])));
    case("matmul", vec![r(rng, &[3, 4]), r(rng, &[4, 2])], Box::new(|g, p| g.matmul(p[0], p[1])));
    case(
        "conv2d",
        vec![r(rng, &[2, 2, 4, 4]), r(rng, &[3, 2, 3, 3])],
        Box::new(|g, p| g.conv2d(p[0], p[1], 1, 1)),
    );
    case(
        "conv2d_strided",
        vec![r(rng, &[1, 2, 5, 5]), r(rng, &[2, 2, 3, 3])],
        Box::new(|g, p| g.conv2d(p[0], p[1], 2, 0)),
    );
    case("max_pool2", vec![distinct(rng, &[2, 2, 4, 4])], Box::new(|g, p| g.max_pool2(p[0])));
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    case(
        "softmax_cross_entropy",
        vec![r(rng, &[4, 3])],
        Box::new(move |g, p| g.softmax_cross_entropy(p[0], &targets)),
    );
    case(
        "scale_shift",
        vec![r(rng, &[3, 4]), r(rng, &[4]), r(rng, &[4])],
        Box::new(|g, p| g.scale_shift(p[0], p[1], p[2])),
    );
    case(
        "scale_shift_maps",
        vec![r(rng, &[2, 3, 2, 2]), r(rng, &[3]), r(rng, &[3])],
        Box::new(|g, p| g.scale_shift(p[0], p[1], p[2])),
    );
    case("add_bias", vec![r(rng, &[3, 4]), r(rng, &[4])], Box::new(|g, p| g.add_bias(p[0], p[1])));
    case("pad_zero_logit", vec![r(rng, &[3, 1])], Box::new(|g, p| g.pad_zero_logit(p[0])));
    let eps = r(rng, &[5]);
    case(
        "reparam",
        vec![r(rng, &[5]), r(rng, &[5])],
        Box::new(move |g, p| g.reparam(p[0], p[1], &eps)),
    );
    let consts = Arc::new(DiagKlConstants {
        mean: (0..5).map(|_| uniform(rng, -2.0, 2.0)).collect(),
        precision: (0..5).map(|_| uniform(rng, 0.1, 3.0)).collect(),
        trace_weight: (0..5).map(|_| uniform(rng, 0.1, 3.0)).collect(),
    });
    case(
        "diag_kl",
        vec![r(rng, &[5]), r(rng, &[5])],
        Box::new(move |g, p| g.diag_kl(p[0], p[1], Arc::clone(&consts))),
    );
    cases
}

/// Scalar loss: the op output itself, or its dot product with fixed random
/// weights.
fn case_loss(case: &OpCase, inputs: &[Tensor], weights: &Option<Tensor>) -> Result<(Graph, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &ids)?;
    let loss = match weights {
        None => out,
        Some(w) => {
            let w = g.constant(w.clone());
            let p = g.mul(out, w)?;
            g.sum(p)?
        }
    };
    Ok((g, ids, loss))
}

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-3)` between analytic
/// gradients and central differences with step `1e-5`.
fn case_error(case: &OpCase, rng: &mut ChaCha8Rng) -> Result<f64> {
    const H: f64 = 1e-5;
    let weights = {
        let (g, _, out) = case_loss(case, &case.inputs, &None)?;
        let v = g.value(out);
        (!v.is_scalar()).then(|| random_tensor(rng, v.shape(), -1.0, 1.0))
    };
    let (g, ids, loss) = case_loss(case, &case.inputs, &weights)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        for k in 0..case.inputs[i].len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut inputs = case.inputs.clone();
                inputs[i].data_mut()[k] += delta;
                let (g, _, l) = case_loss(case, &inputs, &weights)?;
                Ok(g.value(l).item())
            };
            let numeric = (eval(H)? - eval(-H)?) / (2.0 * H);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Worst finite-difference error per op over `seeds` random draws.
pub fn gradient_errors(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        let mut rng = seeded_rng(seed, 500);
        for case in op_cases(&mut rng) {
            let err = case_error(&case, &mut rng)?;
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((case.name, err)),
            }
        }
    }
    Ok(worst)
}

pub fn gradient_check(seeds: u64) -> CheckResult {
    let errors = gradient_errors(seeds).map_err(e2s)?;
    let (name, max) = errors
        .iter()
        .copied()
        .fold(("", 0.0), |best, e| if e.1 > best.1 { e } else { best });
    if max > 1e-4 {
        return Err(format!("{name}: relative error {max:.3e}"));
    }
    Ok(format!("{} ops x {seeds} seeds, worst {max:.1e} ({name})", errors.len()))
}

fn small_net(film: bool, seed: u64) -> Result<VariationalNet> {
    let arch = Architecture::Mlp {
        input: 4,
        hidden: vec![6, 5],
    };
    let init = NetInit {
        logvar: -3.0,
        weight_scale: 1.0,
    };
    let mut net = init_net(&arch, init, film, seed)?;
    net.add_task(0, 3)?;
    net.add_task(1, 2)?;
    Ok(net)
}

fn small_conv(seed: u64) -> Result<VariationalNet> {
    let arch = Architecture::Conv {
        in_channels: 1,
        height: 4,
        width: 4,
        filters: vec![2],
        dense: 3,
    };
    let mut net = init_net(&arch, NetInit::default(), true, seed)?;
    net.add_task(0, 2)?;
    net.add_task(1, 2)?;
    Ok(net)
}

fn input(seed: u64, batch: usize, features: usize) -> Tensor {
    let mut rng = seeded_rng(seed, 501);
    random_tensor(&mut rng, &[batch, features], -2.0, 2.0)
}

fn sampled(net: &VariationalNet, task: usize, x: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = seeded_rng(seed, 502);
    net.forward_sample(task, x, &mut Noise::Draw(&mut rng))
}

pub fn forward_determinism() -> CheckResult {
    for seed in 0..5 {
        let x = input(seed, 3, 4);
        let a = sampled(&small_net(true, seed).map_err(e2s)?, 0, &x, seed).map_err(e2s)?;
        let b = sampled(&small_net(true, seed).map_err(e2s)?, 0, &x, seed).map_err(e2s)?;
        if a != b {
            return Err(format!("seed {seed}: two identical forward passes differ"));
        }
    }
    Ok("5 seeds bit-identical".into())
}

// ---------------------------------------------------------------- gaussian

pub fn kl_nonnegative(kl: KlFn, trials: usize) -> CheckResult {
    let mut rng = seeded_rng(1, 510);
    for t in 0..trials {
        let d = rng.random_range(1..8);
        let (q, p) = (random_gaussian(&mut rng, d), random_gaussian(&mut rng, d));
        let v = kl(&q, &p).map_err(e2s)?;
        if v < 0.0 {
            return Err(format!("trial {t}: KL = {v}"));
        }
        let same = kl(&q, &q).map_err(e2s)?;
        if same.abs() > 1e-12 {
            return Err(format!("trial {t}: KL(q, q) = {same}"));
        }
    }
    Ok(format!("{trials} random pairs"))
}

pub fn tempering_identity(kl: KlFn, trials: usize) -> CheckResult {
    let mut rng = seeded_rng(2, 511);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let d = rng.random_range(1..8);
        let (q, p) = (random_gaussian(&mut rng, d), random_gaussian(&mut rng, d));
        let lambda = uniform(&mut rng, 0.1, 10.0);
        let lhs = kl(&temper(&q, lambda).map_err(e2s)?, &temper(&p, lambda).map_err(e2s)?).map_err(e2s)?;
        let rhs = kl_lambda(&q, &p, lambda).map_err(e2s)?;
        let err = (lhs - rhs).abs();
        if err > 1e-12 {
            return Err(format!("trial {t}: tempered KL {lhs} vs {rhs} (lambda {lambda:.3})"));
        }
        worst = worst.max(err);
    }
    Ok(format!("{trials} draws, worst {worst:.1e}"))
}

pub fn clipped_prior_reductions(kl: KlFn, trials: usize) -> CheckResult {
    let mut rng = seeded_rng(3, 512);
    for t in 0..trials {
        let d = rng.random_range(1..6);
        let (q, base) = (random_gaussian(&mut rng, d), random_gaussian(&mut rng, d));
        // prior0 broader than the base everywhere keeps the clip inactive
        let broad: Vec<f64> = base.var().iter().map(|v| v * uniform(&mut rng, 1.5, 4.0)).collect();
        let unit = ClippedPrecisionPrior::new(base.clone(), broad, 1.0).map_err(e2s)?;
        let (a, b) = (kl_lambda_tilde(&q, &unit).map_err(e2s)?, kl(&q, &base).map_err(e2s)?);
        if !close(a, b, 1e-12) {
            return Err(format!("trial {t}: lambda = 1 gives {a}, plain KL {b}"));
        }
        let flat = kl_lambda_tilde(&q, &ClippedPrecisionPrior::new(base.clone(), base.var().to_vec(), 1.0).map_err(e2s)?)
            .map_err(e2s)?;
        let lambda = uniform(&mut rng, 1.0, 100.0);
        let scaled = ClippedPrecisionPrior::new(base.clone(), base.var().to_vec(), lambda).map_err(e2s)?;
        let v = kl_lambda_tilde(&q, &scaled).map_err(e2s)?;
        if !close(v, flat, 1e-12) {
            return Err(format!("trial {t}: no data precision but lambda {lambda:.2} changes {flat} to {v}"));
        }
    }
    Ok(format!("{trials} draws"))
}

fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> SymMatrix {
    let a: Vec<f64> = (0..p * p).map(|_| rng.sample(StandardNormal)).collect();
    let mut data = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            data[i * p + j] = (0..p).map(|k| a[i * p + k] * a[j * p + k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
        }
    }
    SymMatrix::new(p, data).expect("symmetric by construction")
}

/// `KL(N(0, diag(v)) ‖ N(0, H⁻¹))` for a full precision `H`.
fn diag_to_full_kl(v: &[f64], h: &SymMatrix) -> f64 {
    let p = v.len();
    let chol = h.cholesky().expect("SPD");
    let logdet_h: f64 = (0..p).map(|i| 2.0 * chol[i * p + i].ln()).sum();
    let trace: f64 = (0..p).map(|i| h.get(i, i) * v[i]).sum();
    0.5 * (trace - p as f64 - v.iter().map(|x| x.ln()).sum::<f64>() - logdet_h)
}

/// Coordinate-wise golden-section search over log-variances.
fn numeric_diag_minimizer(h: &SymMatrix) -> Vec<f64> {
    let p = h.dim();
    let mut logv = vec![0.0; p];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _sweep in 0..3 {
        for i in 0..p {
            let f = |x: f64, lv: &mut Vec<f64>| {
                lv[i] = x;
                let v: Vec<f64> = lv.iter().map(|l| l.exp()).collect();
                diag_to_full_kl(&v, h)
            };
            let (mut a, mut b) = (-12.0, 8.0);
            let mut work = logv.clone();
            while b - a > 1e-10 {
                let c = b - phi * (b - a);
                let d = a + phi * (b - a);
                if f(c, &mut work) < f(d, &mut work) {
                    b = d;
                } else {
                    a = c;
                }
            }
            logv[i] = 0.5 * (a + b);
        }
    }
    logv.iter().map(|l| l.exp()).collect()
}

pub fn diag_precision_matching(trials: usize) -> CheckResult {
    let mut rng = seeded_rng(4, 513);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let p = rng.random_range(1..=4);
        let h = random_spd(&mut rng, p);
        let v = diag_approx_by_precision(&h).map_err(e2s)?;
        let numeric = numeric_diag_minimizer(&h);
        for (a, b) in v.iter().zip(&numeric) {
            let rel = (a - b).abs() / b;
            worst = worst.max(rel);
            if rel > 1e-4 {
                return Err(format!("trial {t}: variance {a} vs numerical minimizer {b}"));
            }
        }
    }
    Ok(format!("{trials} matrices, worst {worst:.1e}"))
}

/// `(1/δ)·Σ excluded κ + Σ log(included κ)` for an index subset.
fn subset_cost(eigs: &[f64], included: &[usize], delta: f64) -> f64 {
    eigs.iter()
        .enumerate()
        .map(|(i, &k)| if included.contains(&i) { k.ln() } else { k / delta })
        .sum()
}

pub fn low_rank_exhaustive(trials: usize) -> CheckResult {
    let mut rng = seeded_rng(5, 514);
    let delta = 1e-3;
    for t in 0..trials {
        let p = rng.random_range(2..=6);
        let k = rng.random_range(1..p);
        let h = random_spd(&mut rng, p);
        let chosen = low_rank_select(&h, k, delta).map_err(e2s)?;
        let (eigs, _) = h.symmetric_eigen();
        let mut best = (f64::INFINITY, Vec::new());
        for mask in 0u32..(1 << p) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let idx: Vec<usize> = (0..p).filter(|i| mask >> i & 1 == 1).collect();
            let c = subset_cost(&eigs, &idx, delta);
            if c < best.0 {
                best = (c, idx);
            }
        }
        let mut want: Vec<f64> = best.1.iter().map(|&i| eigs[i]).collect();
        let mut got = chosen.values.clone();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        if want.iter().zip(&got).any(|(a, b)| !close(*a, *b, 1e-10)) {
            return Err(format!("trial {t}: kept {got:?}, exhaustive search keeps {want:?}"));
        }
    }
    Ok(format!("{trials} matrices, p <= 6"))
}

pub fn film_scale_root(trials: usize) -> CheckResult {
    let mut rng = seeded_rng(6, 515);
    for t in 0..trials {
        let d = rng.random_range(1..10);
        let (q, p) = (random_gaussian(&mut rng, d), random_gaussian(&mut rng, d));
        let c = film_optimal_scale(&q, &p).map_err(e2s)?;
        let g = film_scaled_kl_derivative(&q, &p, c).map_err(e2s)?;
        let below = film_scaled_kl_derivative(&q, &p, c * (1.0 - 1e-3)).map_err(e2s)?;
        let above = film_scaled_kl_derivative(&q, &p, c * (1.0 + 1e-3)).map_err(e2s)?;
        let curv = film_scaled_kl_curvature(&q, &p, c).map_err(e2s)?;
        if !(c > 0.0) || g.abs() > 1e-8 || below >= 0.0 || above <= 0.0 || curv <= 0.0 {
            return Err(format!("trial {t}: c* = {c}, derivative {g:.2e}, bracket ({below:.2e}, {above:.2e})"));
        }
    }
    Ok(format!("{trials} instances"))
}

// ---------------------------------------------------------------- net

pub fn film_identity() -> CheckResult {
    for seed in 0..3 {
        let x = input(seed, 4, 4);
        let with = sampled(&small_net(true, seed).map_err(e2s)?, 0, &x, seed).map_err(e2s)?;
        let without = sampled(&small_net(false, seed).map_err(e2s)?, 0, &x, seed).map_err(e2s)?;
        if with != without {
            return Err(format!("seed {seed}: identity FiLM changes the output"));
        }
    }
    Ok("mlp, 3 seeds".into())
}

pub fn task_isolation() -> CheckResult {
    let mlp = small_net(true, 7).map_err(e2s)?;
    let conv = small_conv(7).map_err(e2s)?;
    for (name, net, features) in [("mlp", mlp, 4), ("conv", conv, 16)] {
        let x = input(8, 3, features);
        let before = sampled(&net, 1, &x, 9).map_err(e2s)?;
        let mut changed = net.clone();
        let tp = changed.tasks.get_mut(&0).expect("task 0 exists");
        for f in &mut tp.film {
            f.scale = f.scale.map(|v| v * 3.0 - 0.5);
            f.shift = f.shift.map(|v| v + 1.25);
        }
        if let Some(h) = &mut tp.head {
            h.weight = h.weight.map(|v| -2.0 * v);
        }
        if sampled(&changed, 1, &x, 9).map_err(e2s)? != before {
            return Err(format!("{name}: editing task 0 moved task 1"));
        }
        if sampled(&changed, 0, &x, 9).map_err(e2s)? == sampled(&net, 0, &x, 9).map_err(e2s)? {
            return Err(format!("{name}: editing task 0 had no effect on task 0"));
        }
    }
    Ok("mlp and conv".into())
}

fn sampled_nll(net: &VariationalNet, x: &Tensor, y: &[usize], seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let b = net.bind(&mut g, 0, ParamMode::Frozen)?;
    let xn = g.constant(x.clone());
    let mut rng = seeded_rng(seed, 503);
    let logits = net.forward(&mut g, &b, xn, &mut Noise::Draw(&mut rng))?;
    let ce = g.softmax_cross_entropy(logits, y)?;
    Ok(g.value(ce).item())
}

pub fn sampled_likelihood_gradient() -> CheckResult {
    const H: f64 = 1e-5;
    let mut net = small_net(true, 11).map_err(e2s)?;
    let x = input(12, 5, 4);
    let y = [0, 2, 1, 1, 0];
    let mut g = Graph::new();
    let b = net.bind(&mut g, 0, ParamMode::Variational).map_err(e2s)?;
    let xn = g.constant(x.clone());
    let mut rng = seeded_rng(13, 503);
    let logits = net.forward(&mut g, &b, xn, &mut Noise::Draw(&mut rng)).map_err(e2s)?;
    let ce = g.softmax_cross_entropy(logits, &y).map_err(e2s)?;
    let grads = g.backward(ce).map_err(e2s)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for l in 0..net.shared.len() {
        let nodes = b.shared[l];
        let slots: [(NodeId, usize); 4] = [
            (nodes.weight_mu, 0),
            (nodes.weight_logvar.expect("variational binding"), 1),
            (nodes.bias_mu, 2),
            (nodes.bias_logvar.expect("variational binding"), 3),
        ];
        for (id, slot) in slots {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(g.value(id).shape()));
            for k in 0..analytic.len() {
                let mut eval = |delta: f64| {
                    let layer = &mut net.shared[l];
                    let t = match slot {
                        0 => &mut layer.weight_mu,
                        1 => &mut layer.weight_logvar,
                        2 => &mut layer.bias_mu,
                        _ => &mut layer.bias_logvar,
                    };
                    t.data_mut()[k] += delta;
                    let v = sampled_nll(&net, &x, &y, 13);
                    let layer = &mut net.shared[l];
                    let t = match slot {
                        0 => &mut layer.weight_mu,
                        1 => &mut layer.weight_logvar,
                        2 => &mut layer.bias_mu,
                        _ => &mut layer.bias_logvar,
                    };
                    t.data_mut()[k] -= delta;
                    v
                };
                let numeric = (eval(H).map_err(e2s)? - eval(-H).map_err(e2s)?) / (2.0 * H);
                let a = analytic.data()[k];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    if worst > 1e-4 {
        return Err(format!("worst relative error {worst:.3e}"));
    }
    Ok(format!("{checked} coordinates, worst {worst:.1e}"))
}

pub fn kl_additivity() -> CheckResult {
    let net = small_net(false, 14).map_err(e2s)?;
    let other = small_net(false, 15).map_err(e2s)?;
    let prior = other.posterior();
    let whole = kl_diag(&net.posterior(), &prior).map_err(e2s)?;
    let mut offset = 0;
    let mut parts = 0.0;
    for l in &net.shared {
        let mu: Vec<f64> = l.weight_mu.data().iter().chain(l.bias_mu.data()).copied().collect();
        let var: Vec<f64> = l.weight_logvar.data().iter().chain(l.bias_logvar.data()).map(|v| v.exp()).collect();
        let n = mu.len();
        let p = DiagGaussian::new(
            prior.mu()[offset..offset + n].to_vec(),
            prior.var()[offset..offset + n].to_vec(),
        )
        .map_err(e2s)?;
        parts += kl_diag(&DiagGaussian::new(mu, var).map_err(e2s)?, &p).map_err(e2s)?;
        offset += n;
    }
    // λ = 1 with a broad initial prior: the graph KL is the plain KL
    let clipped = ClippedPrecisionPrior::new(prior.clone(), vec![1e6; prior.dim()], 1.0).map_err(e2s)?;
    let terms = KlTerms::new(&net, &clipped, 1.0).map_err(e2s)?;
    let mut g = Graph::new();
    let b = net.bind(&mut g, 0, ParamMode::Variational).map_err(e2s)?;
    let node = terms.node(&mut g, &b).map_err(e2s)?;
    let graph = g.value(node).item();
    if !close(whole, parts, 1e-12) || !close(whole, graph, 1e-10) {
        return Err(format!("whole {whole}, per-layer sum {parts}, graph {graph}"));
    }
    Ok(format!("{} layers, KL {whole:.4}", net.shared.len()))
}

// ---------------------------------------------------------------- objectives

pub fn vcl_elbo_reduction() -> CheckResult {
    let net = small_net(false, 16).map_err(e2s)?;
    let prior0 = DiagGaussian::isotropic(net.posterior().dim(), 0.0, 1.0).map_err(e2s)?;
    let prior = ClippedPrecisionPrior::initial(&prior0, 1.0).map_err(e2s)?;
    let x = input(17, 6, 4);
    let y = [0, 1, 2, 2, 1, 0];
    let n_task = 120;
    let cfg = GvclConfig::default();
    let terms = KlTerms::new(&net, &prior, 1.0).map_err(e2s)?;
    let mut g = Graph::new();
    let b = net.bind(&mut g, 0, ParamMode::Variational).map_err(e2s)?;
    let nodes = beta_elbo_loss(&mut g, &net, &b, &x, &y, &terms, &cfg, n_task, &mut seeded_rng(18, 0)).map_err(e2s)?;
    let loss = g.value(nodes.loss).item();

    // The same ELBO without the objective module: one draw, mean
    // cross-entropy, closed-form KL over n.
    let mut rng = seeded_rng(18, 0);
    let logits = net.forward_sample(0, &x, &mut Noise::Draw(&mut rng)).map_err(e2s)?;
    let classes = logits.shape()[1];
    let nll: f64 = logits
        .data()
        .chunks(classes)
        .zip(&y)
        .map(|(row, &t)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum::<f64>()
        / y.len() as f64;
    let direct = nll + kl_diag(&net.posterior(), &prior0).map_err(e2s)? / n_task as f64;
    if !close(loss, direct, 1e-12) {
        return Err(format!("objective {loss}, direct ELBO {direct}"));
    }
    Ok(format!("loss {loss:.6}"))
}

pub fn kl_ignores_film() -> CheckResult {
    let net = small_net(true, 19).map_err(e2s)?;
    let prior0 = DiagGaussian::isotropic(net.posterior().dim(), 0.0, 1.0).map_err(e2s)?;
    let prior = ClippedPrecisionPrior::initial(&prior0, 100.0).map_err(e2s)?;
    let terms = KlTerms::new(&net, &prior, 1.0).map_err(e2s)?;
    let mut g = Graph::new();
    let b = net.bind(&mut g, 0, ParamMode::Variational).map_err(e2s)?;
    let kl = terms.node(&mut g, &b).map_err(e2s)?;
    let grads = g.backward(kl).map_err(e2s)?;
    for (s, sh) in &b.film {
        for id in [s, sh] {
            if let Some(gr) = grads.get(*id) {
                if gr.data().iter().any(|&v| v != 0.0) {
                    return Err("KL has a nonzero FiLM gradient".into());
                }
            }
        }
    }
    Ok(format!("{} FiLM sites", b.film.len()))
}

pub fn ewc_constant_shift() -> CheckResult {
    let net = small_net(false, 20).map_err(e2s)?;
    let dim = net.posterior().dim();
    let mut rng = seeded_rng(21, 0);
    let state = EwcState {
        fisher_acc: (0..dim).map(|_| uniform(&mut rng, 0.0, 5.0)).collect(),
        anchor: (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect(),
        lambda: 3.0,
        gamma: 1.0,
    };
    let penalty = |shift: f64| -> Result<f64> {
        let mut g = Graph::new();
        let b = net.bind(&mut g, 0, ParamMode::MeanOnly)?;
        let nll = g.constant(Tensor::scalar(0.7 + shift));
        let loss = ewc_loss(&mut g, &b, nll, &state, 50)?;
        Ok(g.value(loss).item() - g.value(nll).item())
    };
    let base = penalty(0.0).map_err(e2s)?;
    for shift in [-3.0, 1.5, 40.0] {
        let p = penalty(shift).map_err(e2s)?;
        if !close(p, base, 1e-12) {
            return Err(format!("shift {shift}: penalty {p} vs {base}"));
        }
    }
    Ok(format!("penalty {base:.4}"))
}

// ---------------------------------------------------------------- runner

fn tiny_tasks() -> Result<crate::data::TaskSequence> {
    gen_synthetic_tasks(3, 3, 5, 48, 20)
}

fn tiny_arch() -> Architecture {
    Architecture::Mlp {
        input: 5,
        hidden: vec![8],
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        eval_samples: 4,
        lr: 1e-2,
        init_logvar: -4.0,
        ..TrainConfig::default()
    }
}

pub fn vcl_equals_unit_gvcl() -> CheckResult {
    let tasks = tiny_tasks().map_err(e2s)?;
    let cfg = tiny_config();
    let unit = TrainConfig {
        beta: 1.0,
        lambda: 1.0,
        gamma: 1.0,
        ..cfg.clone()
    };
    let opts = RunOptions::default();
    let vcl = run_continual(Method::Vcl, &tasks, &tiny_arch(), &cfg, 4, &opts).map_err(e2s)?;
    let gvcl = run_continual(Method::Gvcl, &tasks, &tiny_arch(), &unit, 4, &opts).map_err(e2s)?;
    if vcl.matrix != gvcl.matrix || vcl.ece != gvcl.ece {
        return Err("VCL and GVCL(beta = lambda = 1) results differ".into());
    }
    Ok("result matrices bit-identical".into())
}

pub fn prior_chain() -> CheckResult {
    let tasks = tiny_tasks().map_err(e2s)?;
    let cfg = TrainConfig {
        lambda: 10.0,
        beta: 0.5,
        ..tiny_config()
    };
    let mut learner = Learner::new(Method::Gvcl, &tiny_arch(), &cfg, 5).map_err(e2s)?;
    let prior0 = DiagGaussian::isotropic(learner.net().posterior().dim(), 0.0, cfg.prior_var).map_err(e2s)?;
    for task in tasks.tasks() {
        learner.train_task(task).map_err(e2s)?;
        let want = ClippedPrecisionPrior::new(learner.net().posterior(), prior0.var().to_vec(), 10.0).map_err(e2s)?;
        let (a, b) = (
            serde_json::to_string(learner.prior()).map_err(|e| e.to_string())?,
            serde_json::to_string(&want).map_err(|e| e.to_string())?,
        );
        if a != b {
            return Err(format!("task {}: stored prior is not the wrapped posterior", task.id));
        }
    }
    Ok(format!("{} tasks", tasks.len()))
}

pub fn run_determinism() -> CheckResult {
    let tasks = tiny_tasks().map_err(e2s)?;
    let opts = RunOptions::default();
    for method in [Method::GvclFilm, Method::Ewc] {
        let cfg = TrainConfig {
            max_epochs: 3,
            ..tiny_config()
        };
        let a = run_continual(method, &tasks, &tiny_arch(), &cfg, 6, &opts).map_err(e2s)?;
        let b = run_continual(method, &tasks, &tiny_arch(), &cfg, 6, &opts).map_err(e2s)?;
        if !a.same_results(&b) {
            return Err(format!("{}: two runs differ", method.name()));
        }
    }
    Ok("gvcl_film and ewc".into())
}

pub fn film_freshness() -> CheckResult {
    let tasks = tiny_tasks().map_err(e2s)?;
    let mut learner = Learner::new(Method::GvclFilm, &tiny_arch(), &tiny_config(), 7).map_err(e2s)?;
    let mut finished = Vec::new();
    for task in tasks.tasks() {
        learner.net_mut().add_task(task.id, task.classes).map_err(e2s)?;
        let fresh = learner.net().task_params(task.id).map_err(e2s)?;
        if fresh.film.iter().any(|f| f.scale.data().iter().any(|&v| v != 1.0) || f.shift.data().iter().any(|&v| v != 0.0)) {
            return Err(format!("task {} starts with non-identity FiLM", task.id));
        }
        learner.train_task(task).map_err(e2s)?;
        finished.push((task.id, learner.net().task_params(task.id).map_err(e2s)?.film.clone()));
        for (id, film) in &finished {
            if learner.net().task_params(*id).map_err(e2s)?.film != *film {
                return Err(format!("task {id} FiLM changed after its task ended"));
            }
        }
    }
    Ok(format!("{} tasks", tasks.len()))
}

// ---------------------------------------------------------------- data

pub fn idx_rejects_inconsistent() -> CheckResult {
    let dir = std::env::temp_dir().join(format!("gvcl-verify-idx-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let result = idx_cases(&dir);
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn idx_cases(dir: &std::path::Path) -> CheckResult {
    let (img, lab) = (dir.join("img"), dir.join("lab"));
    let pixels: Vec<u8> = (0..3 * 4).map(|i| (i * 20) as u8).collect();
    write_idx(&img, &lab, &pixels, 2, 2, &[0, 1, 2]).map_err(e2s)?;
    let good = load_idx(&img, &lab).map_err(e2s)?;
    if good.len() != 3 || good.features() != 4 {
        return Err("valid file misread".into());
    }
    let bytes = std::fs::read(&img).map_err(|e| e.to_string())?;
    let labels = std::fs::read(&lab).map_err(|e| e.to_string())?;
    let mut cases: Vec<(&str, Vec<u8>, Vec<u8>)> = vec![
        ("short payload", bytes[..bytes.len() - 1].to_vec(), labels.clone()),
        ("long payload", [bytes.clone(), vec![0]].concat(), labels.clone()),
        ("truncated header", bytes[..10].to_vec(), labels.clone()),
        ("label count", bytes.clone(), labels[..labels.len() - 1].to_vec()),
    ];
    let mut bad_magic = bytes.clone();
    bad_magic[3] = 0x01;
    cases.push(("magic", bad_magic, labels.clone()));
    let mut bad_count = bytes.clone();
    bad_count[7] = 4;
    cases.push(("image count", bad_count, labels));
    for (name, i, l) in &cases {
        std::fs::write(&img, i).map_err(|e| e.to_string())?;
        std::fs::write(&lab, l).map_err(|e| e.to_string())?;
        if load_idx(&img, &lab).is_ok() {
            return Err(format!("{name} mismatch accepted"));
        }
    }
    Ok(format!("{} malformed files rejected", cases.len()))
}

pub fn generators_pure() -> CheckResult {
    let same = gen_synthetic_tasks(1, 2, 4, 30, 10).map_err(e2s)? == gen_synthetic_tasks(1, 2, 4, 30, 10).map_err(e2s)?
        && gen_toy_clusters(2, 20, 0.5).map_err(e2s)? == gen_toy_clusters(2, 20, 0.5).map_err(e2s)?
        && crate::data::gen_curvature_toy(3) == crate::data::gen_curvature_toy(3);
    let differ = gen_synthetic_tasks(1, 2, 4, 30, 10).map_err(e2s)? != gen_synthetic_tasks(2, 2, 4, 30, 10).map_err(e2s)?
        && crate::data::gen_curvature_toy(3) != crate::data::gen_curvature_toy(4);
    match (same, differ) {
        (true, true) => Ok("synthetic, clusters, curvature".into()),
        (false, _) => Err("same seed produced different data".into()),
        (_, false) => Err("different seeds produced identical data".into()),
    }
}

// ---------------------------------------------------------------- metrics

/// Accuracies from a model where task `j` scores `a[j] − d·(tasks trained
/// after it)`; any training order then yields the same metrics.
fn ordered_matrix(order: &[usize], a: &[f64], ind: &[f64], d: f64) -> ResultMatrix {
    let rows = (0..order.len())
        .map(|i| (0..=i).map(|pos| a[order[pos]] - d * (i - pos) as f64).collect())
        .collect();
    let independent = order.iter().map(|&t| ind[t]).collect();
    ResultMatrix::new(rows, Some(independent)).expect("triangular by construction")
}

pub fn metric_relabelling(trials: usize) -> CheckResult {
    let mut rng = seeded_rng(8, 520);
    for t in 0..trials {
        let n = rng.random_range(2..7);
        let a: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.6, 1.0)).collect();
        let ind: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.6, 1.0)).collect();
        let d = uniform(&mut rng, 0.0, 0.05);
        let identity: Vec<usize> = (0..n).collect();
        let mut perm = identity.clone();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let (r, p) = (ordered_matrix(&identity, &a, &ind, d), ordered_matrix(&perm, &a, &ind, d));
        let pairs = [
            ("acc", acc(&r), acc(&p)),
            ("bwt", bwt(&r), bwt(&p)),
            ("fwt", fwt(&r), fwt(&p)),
            ("delta_acc", delta_acc(&r, n / 2 + 1), delta_acc(&p, n / 2 + 1)),
        ];
        for (name, x, y) in pairs {
            let (x, y) = (x.map_err(e2s)?, y.map_err(e2s)?);
            if (x - y).abs() > 1e-12 {
                return Err(format!("trial {t}: {name} {x} vs {y} under order {perm:?}"));
            }
        }
    }
    Ok(format!("{trials} orders"))
}

pub fn ece_range_and_calibration() -> CheckResult {
    let mut rng = seeded_rng(9, 521);
    for t in 0..100 {
        let n = rng.random_range(1..200);
        let conf: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let ok: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let e = ece(&conf, &ok, 15).map_err(e2s)?;
        if !(0.0..=1.0).contains(&e) {
            return Err(format!("trial {t}: ECE {e}"));
        }
    }
    let n = 100_000;
    let conf: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.5, 1.0)).collect();
    let ok: Vec<bool> = conf.iter().map(|&c| rng.random::<f64>() < c).collect();
    let e = ece(&conf, &ok, 15).map_err(e2s)?;
    if e > 0.01 {
        return Err(format!("calibrated sample of {n} has ECE {e}"));
    }
    Ok(format!("calibrated ECE {e:.4} at n = {n}"))
}

// ---------------------------------------------------------------- experiment

const TOY_CONFIG: &str = r#"
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

pub fn config_round_trip() -> CheckResult {
    let cfg = ExperimentConfig::parse(TOY_CONFIG, "toy").map_err(e2s)?;
    let text = cfg.to_toml().map_err(e2s)?;
    let again = ExperimentConfig::parse(&text, "round trip").map_err(e2s)?;
    if cfg != again {
        return Err("parse . serialize . parse changed the config".into());
    }
    Ok(format!("{} methods", cfg.methods.len()))
}

pub fn output_layout() -> CheckResult {
    let p = record_path(std::path::Path::new("runs"), "toy", Method::GvclFilm, 3);
    let want = std::path::Path::new("runs").join("toy").join("gvcl_film").join("3").join("record.json");
    if p != want {
        return Err(format!("{} instead of {}", p.display(), want.display()));
    }
    Ok(p.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Off by `d/2` for every unequal pair.
    fn corrupted_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
        Ok(kl_diag(q, p)? + 0.5 * q.dim() as f64 * f64::from(q != p))
    }

    #[test]
    fn corrupted_kl_fails_the_identity() {
        assert!(tempering_identity(kl_diag, 200).is_ok());
        let err = tempering_identity(corrupted_kl, 200).unwrap_err();
        assert!(err.contains("tempered KL"), "{err}");
    }

    #[test]
    fn table_reports_each_check_with_time() {
        let checks = vec![
            Check::new("ok", || Ok("fine".into())),
            Check::new("bad", || Err("broken".into())),
        ];
        let table = render_table(&run_suite(&checks));
        assert!(table.contains("PASS") && table.contains("FAIL") && table.contains("broken"));
        assert!(table.contains("1 passed, 1 failed"));
    }

    #[test]
    fn relabelled_orders_agree() {
        metric_relabelling(50).unwrap();
    }
}
