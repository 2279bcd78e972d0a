//! Training objectives: the tempered-likelihood ELBO with a λ-weighted prior
//! KL, the Online EWC quadratic penalty, Fisher diagonals, and the
//! one-parameter curvature probe.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiagKlConstants, Graph, NodeId};
use crate::error::{Error, Result};
use crate::gaussian::{ClippedPrecisionPrior, DiagGaussian};
use crate::optim::Adam;
use crate::net::{Binding, Noise, ParamMode, VariationalNet};
use crate::tensor::Tensor;

/// Hyperparameters of the variational objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GvclConfig {
    /// Weight on the prior KL relative to the expected log-likelihood.
    pub beta: f64,
    /// Up-weighting of the data-dependent prior precision.
    pub lambda: f64,
    /// Multiplier on the KL trace term; `1` keeps the clipped prior.
    pub gamma: f64,
    /// Posterior draws averaged per training step.
    pub mc_samples: usize,
    /// Divide the KL by the task's training-set size.
    pub kl_scale: bool,
}

impl Default for GvclConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 1.0,
            gamma: 1.0,
            mc_samples: 1,
            kl_scale: true,
        }
    }
}

impl GvclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(self.lambda > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config("lambda and gamma must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.beta > 1.0 || self.lambda < 1.0 || self.gamma > 1.0 {
            log::warn!(
                "unusual objective settings beta={} lambda={} gamma={}",
                self.beta,
                self.lambda,
                self.gamma
            );
        }
        Ok(())
    }
}

/// Constants of the prior KL laid out per shared tensor, so the KL can be
/// rebuilt inside a graph:
/// `½ Σ [ q·(μ − m)² + t·exp(logvar) − logvar ] + constant`.
#[derive(Debug, Clone)]
pub struct KlTerms {
    tensors: Vec<Arc<DiagKlConstants>>,
    constant: f64,
}

impl KlTerms {
    /// With `gamma == 1` the quadratic term uses the clipped λ-precision of
    /// `prior`; otherwise the unclipped `λ / var` with the trace term scaled
    /// by `gamma`.
    pub fn new(net: &VariationalNet, prior: &ClippedPrecisionPrior, gamma: f64) -> Result<Self> {
        let sizes = net.shared_sizes();
        let total: usize = sizes.iter().sum();
        if prior.dim() != total {
            return Err(Error::Dimension(total, prior.dim()));
        }
        let base = prior.base();
        let quad = if gamma == 1.0 {
            prior.precision()
        } else {
            base.var().iter().map(|v| prior.lambda() / v).collect()
        };
        if let Some(i) = quad.iter().position(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!("effective precision[{i}] = {} is not positive", quad[i])));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(sizes.len());
        for n in sizes {
            let r = offset..offset + n;
            tensors.push(Arc::new(DiagKlConstants {
                mean: base.mu()[r.clone()].to_vec(),
                precision: quad[r.clone()].to_vec(),
                trace_weight: base.var()[r].iter().map(|v| gamma / v).collect(),
            }));
            offset += n;
        }
        let constant = 0.5 * base.var().iter().map(|v| v.ln() - 1.0).sum::<f64>();
        Ok(Self { tensors, constant })
    }

    /// KL node over the shared parameters of a variational binding.
    pub fn node(&self, g: &mut Graph, b: &Binding) -> Result<NodeId> {
        let pairs: Vec<(NodeId, Option<NodeId>)> = b
            .shared
            .iter()
            .flat_map(|l| [(l.weight_mu, l.weight_logvar), (l.bias_mu, l.bias_logvar)])
            .collect();
        if pairs.len() != self.tensors.len() {
            return Err(Error::Dimension(self.tensors.len(), pairs.len()));
        }
        let mut total: Option<NodeId> = None;
        for ((mu, lv), terms) in pairs.into_iter().zip(&self.tensors) {
            let lv = lv.ok_or_else(|| Error::InvalidArgument("KL needs log-variances bound".into()))?;
            let s = g.diag_kl(mu, lv, Arc::clone(terms))?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        let sum = total.ok_or_else(|| Error::Architecture("network has no shared layers".into()))?;
        let c = g.constant(Tensor::scalar(self.constant));
        g.add(sum, c)
    }
}

/// Tempered VI for the conjugate model `y ~ N(θ, noise_var)` with prior
/// `N(0, prior_var)`: minimizes `mean E_q[−log p(y|θ)] + β·KL(q ‖ prior)/N`
/// over `q = N(μ, exp(logvar))` with Adam on the graph. The expected
/// likelihood is exact, so the result is deterministic.
pub fn conjugate_beta_vi(ys: &[f64], noise_var: f64, prior_var: f64, beta: f64, steps: usize) -> Result<DiagGaussian> {
    if ys.is_empty() || !(noise_var > 0.0 && prior_var > 0.0 && beta > 0.0) {
        return Err(Error::InvalidArgument("conjugate fit needs data and positive variances".into()));
    }
    let n = ys.len() as f64;
    let ybar = ys.iter().sum::<f64>() / n;
    let consts = Arc::new(DiagKlConstants {
        mean: vec![0.0],
        precision: vec![1.0 / prior_var],
        trace_weight: vec![1.0 / prior_var],
    });
    let mut mu = Tensor::vector(vec![0.0]);
    let mut logvar = Tensor::vector(vec![prior_var.ln()]);
    let mut opt = Adam::new(1e-2);
    let phases = [1e-2, 1e-3, 1e-4, 1e-5];
    for (k, lr) in phases.into_iter().enumerate() {
        opt.set_lr(lr);
        let count = if k == 0 { steps } else { steps / 2 };
        for _ in 0..count {
            let mut g = Graph::new();
            let m = g.param(mu.clone());
            let lv = g.param(logvar.clone());
            let yb = g.constant(Tensor::vector(vec![ybar]));
            let d = g.sub(m, yb)?;
            let d2 = g.square(d)?;
            let var = g.exp(lv)?;
            let s = g.add(d2, var)?;
            let s = g.sum(s)?;
            let nll = g.scale(s, 1.0 / (2.0 * noise_var))?;
            let kl = g.diag_kl(m, lv, Arc::clone(&consts))?;
            let kl = g.scale(kl, beta / n)?;
            let loss = g.add(nll, kl)?;
            let grads = g.backward(loss)?;
            let (gm, glv) = (grads.get(m).cloned(), grads.get(lv).cloned());
            opt.step(&mut [&mut mu, &mut logvar], &[gm.as_ref(), glv.as_ref()])?;
        }
    }
    DiagGaussian::new(mu.data().to_vec(), vec![logvar.data()[0].exp()])
}

/// Handles of a built objective.
#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub loss: NodeId,
    pub nll: NodeId,
    pub kl: NodeId,
}

/// Negative tempered ELBO per example:
/// `mean NLL over mc draws + β·KL / n_task` (or `β·KL` when `kl_scale` is off).
#[allow(clippy::too_many_arguments)]
pub fn beta_elbo_loss(
    g: &mut Graph,
    net: &VariationalNet,
    b: &Binding,
    x: &Tensor,
    y: &[usize],
    kl: &KlTerms,
    cfg: &GvclConfig,
    n_task: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ElboNodes> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let xn = g.constant(x.clone());
    let mut nll: Option<NodeId> = None;
    for _ in 0..cfg.mc_samples {
        let logits = net.forward(g, b, xn, &mut Noise::Draw(rng))?;
        let ce = g.softmax_cross_entropy(logits, y)?;
        nll = Some(match nll {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    let mut nll = nll.ok_or_else(|| Error::Config("mc_samples must be at least 1".into()))?;
    if cfg.mc_samples > 1 {
        nll = g.scale(nll, 1.0 / cfg.mc_samples as f64)?;
    }
    let kl_node = kl.node(g, b)?;
    let weight = if cfg.kl_scale { cfg.beta / n_task as f64 } else { cfg.beta };
    let reg = g.scale(kl_node, weight)?;
    let loss = g.add(nll, reg)?;
    Ok(ElboNodes { loss, nll, kl: kl_node })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// Squared score at the observed label.
    Empirical,
    /// Squared score averaged exactly over the model's predictive.
    Model,
}

/// Diagonal Fisher of the shared means, summed over `examples` (the mean
/// over examples scaled by their count). Uses the posterior means as θ.
pub fn fisher_diag(net: &VariationalNet, task: usize, x: &Tensor, y: &[usize], mode: FisherMode) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let dim: usize = net.shared_sizes().iter().sum();
    let mut acc = vec![0.0; dim];
    for (i, &label) in y.iter().enumerate() {
        let xi = x.select_rows(&[i]);
        let probs = match mode {
            FisherMode::Empirical => None,
            FisherMode::Model => Some(net.predict(
                task,
                &xi,
                1,
                crate::net::PredictMode::Mean,
                &mut crate::net::seeded_rng(0, 0),
            )?),
        };
        let targets: Vec<(usize, f64)> = match &probs {
            None => vec![(label, 1.0)],
            Some(p) => p.data().iter().copied().enumerate().collect(),
        };
        for (c, w) in targets {
            if w == 0.0 {
                continue;
            }
            let mut g = Graph::new();
            let b = net.bind(&mut g, task, ParamMode::MeanOnly)?;
            let xn = g.constant(xi.clone());
            let logits = net.forward(&mut g, &b, xn, &mut Noise::Zero)?;
            let ce = g.softmax_cross_entropy(logits, &[c])?;
            let grads = g.backward(ce)?;
            let mut k = 0;
            for l in &b.shared {
                for id in [l.weight_mu, l.bias_mu] {
                    let n = g.value(id).len();
                    if let Some(gr) = grads.get(id) {
                        for (a, v) in acc[k..k + n].iter_mut().zip(gr.data()) {
                            *a += w * v * v;
                        }
                    }
                    k += n;
                }
            }
        }
    }
    Ok(acc)
}

/// Quantities Online EWC carries between tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    pub fisher_acc: Vec<f64>,
    pub anchor: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
}

impl EwcState {
    /// No curvature yet: the penalty vanishes.
    pub fn new(anchor: Vec<f64>, lambda: f64, gamma: f64) -> Self {
        Self {
            fisher_acc: vec![0.0; anchor.len()],
            anchor,
            lambda,
            gamma,
        }
    }
}

/// `fisher_acc ← γ·fisher_acc + fisher_new`, `anchor ← theta_now`.
/// Negative Fisher entries are clipped to zero.
pub fn ewc_update_state(state: &EwcState, fisher_new: &[f64], theta_now: &[f64]) -> Result<EwcState> {
    let n = state.fisher_acc.len();
    if fisher_new.len() != n || theta_now.len() != n {
        return Err(Error::Dimension(n, fisher_new.len().max(theta_now.len())));
    }
    let negatives = fisher_new.iter().filter(|&&f| f < 0.0).count();
    if negatives > 0 {
        log::warn!("clipping {negatives} negative Fisher entries to zero");
    }
    Ok(EwcState {
        fisher_acc: state
            .fisher_acc
            .iter()
            .zip(fisher_new)
            .map(|(a, f)| state.gamma * a + f.max(0.0))
            .collect(),
        anchor: theta_now.to_vec(),
        lambda: state.lambda,
        gamma: state.gamma,
    })
}

/// `nll + (λ / (2·n_task)) Σ fisher_acc·(θ − anchor)²` over the shared means
/// of `b`. The `n_task` division matches the per-example likelihood scale,
/// since `fisher_acc` sums curvature over whole datasets.
pub fn ewc_loss(g: &mut Graph, b: &Binding, nll: NodeId, state: &EwcState, n_task: usize) -> Result<NodeId> {
    if state.fisher_acc.iter().all(|&f| f == 0.0) {
        return Ok(nll);
    }
    let mut offset = 0;
    let mut total: Option<NodeId> = None;
    for l in &b.shared {
        for id in [l.weight_mu, l.bias_mu] {
            let shape = g.value(id).shape().to_vec();
            let n: usize = shape.iter().product();
            if offset + n > state.anchor.len() {
                return Err(Error::Dimension(state.anchor.len(), offset + n));
            }
            let a = g.constant(Tensor::new(shape.clone(), state.anchor[offset..offset + n].to_vec())?);
            let f = g.constant(Tensor::new(shape, state.fisher_acc[offset..offset + n].to_vec())?);
            let d = g.sub(id, a)?;
            let d2 = g.square(d)?;
            let w = g.mul(f, d2)?;
            let s = g.sum(w)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
            offset += n;
        }
    }
    if offset != state.anchor.len() {
        return Err(Error::Dimension(state.anchor.len(), offset));
    }
    let total = total.ok_or_else(|| Error::Architecture("network has no shared layers".into()))?;
    let pen = g.scale(total, state.lambda / (2.0 * n_task as f64))?;
    g.add(nll, pen)
}

/// Mean functions of the one-parameter curvature model `x ~ N(f(θ), 30)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureFn {
    /// `|θ|^1.6`: flat at the origin, curving away from it.
    F1,
    /// `|θ|^¼`: a cusp at the origin that flattens out.
    F2,
    /// `∛((|θ| − 0.5)³ + 0.4)`.
    F3,
    /// `θ`: constant curvature.
    Linear,
}

impl CurvatureFn {
    pub const ALL: [CurvatureFn; 4] = [CurvatureFn::F1, CurvatureFn::F2, CurvatureFn::F3, CurvatureFn::Linear];

    pub fn name(self) -> &'static str {
        match self {
            CurvatureFn::F1 => "f1",
            CurvatureFn::F2 => "f2",
            CurvatureFn::F3 => "f3",
            CurvatureFn::Linear => "linear",
        }
    }

    pub fn eval(self, theta: f64) -> f64 {
        let a = theta.abs();
        match self {
            CurvatureFn::F1 => a.powf(1.6),
            CurvatureFn::F2 => a.powf(0.25),
            CurvatureFn::F3 => ((a - 0.5).powi(3) + 0.4).cbrt(),
            CurvatureFn::Linear => theta,
        }
    }

    fn has_kink(self) -> bool {
        self != CurvatureFn::Linear
    }
}

/// Observation variance of the curvature model.
pub const CURVATURE_NOISE_VAR: f64 = 30.0;

/// Result of fitting `q(θ) = N(μ, σ²)` to the curvature model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureFit {
    pub mu: f64,
    pub var: f64,
    /// `1 / (β (1/σ² − 1))`: the likelihood curvature implied by the fit,
    /// expressed as a variance.
    pub effective_var: f64,
    pub objective: f64,
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((0.5 * (x + 1.0), 1.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// `E[h(μ + σz)]` for standard normal `z`. When `h` has a kink at `θ = 0`
/// the integral is split there and each side is mapped through `u ↦ u⁴`
/// so power-law behaviour at the kink becomes polynomial.
fn gaussian_expectation(mu: f64, sigma: f64, kink: bool, nodes: &[(f64, f64)], h: impl Fn(f64) -> f64) -> f64 {
    const Z: f64 = 10.0;
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let z0 = -mu / sigma;
    let f = |z: f64| phi(z) * h(mu + sigma * z);
    if kink && z0.abs() < Z {
        let mut total = 0.0;
        for (end, len) in [(-Z, z0 + Z), (Z, Z - z0)] {
            let dir = (end - z0).signum();
            for &(u, w) in nodes {
                let t = u * u * u * u;
                let z = z0 + dir * len * t;
                total += w * f(z) * 4.0 * u * u * u * len;
            }
        }
        total
    } else {
        nodes.iter().map(|&(u, w)| w * 2.0 * Z * f(-Z + 2.0 * Z * u)).sum()
    }
}

/// Tempered-ELBO objective of the curvature model at `(μ, log σ)`, constants
/// dropped.
fn curvature_objective(which: CurvatureFn, n: f64, sum_x: f64, beta: f64, mu: f64, log_sigma: f64, nodes: &[(f64, f64)]) -> f64 {
    let sigma = log_sigma.exp();
    let ef = gaussian_expectation(mu, sigma, which.has_kink(), nodes, |t| which.eval(t));
    let ef2 = gaussian_expectation(mu, sigma, which.has_kink(), nodes, |t| which.eval(t).powi(2));
    let nll = (n * ef2 - 2.0 * sum_x * ef) / (2.0 * CURVATURE_NOISE_VAR);
    let var = sigma * sigma;
    let kl = 0.5 * (var + mu * mu - 1.0 - var.ln());
    nll + beta * kl
}

/// Fits `N(μ, σ²)` to `data` under `x ~ N(f(θ), 30)` with prior `N(0, 1)` by
/// minimizing the exact tempered ELBO (expectations by quadrature, damped
/// Newton from several starts).
pub fn curvature_probe_data(beta: f64, which: CurvatureFn, data: &[f64]) -> Result<CurvatureFit> {
    if !(beta > 0.0) || data.is_empty() {
        return Err(Error::InvalidArgument("need beta > 0 and data".into()));
    }
    let nodes = gauss_legendre(96);
    let n = data.len() as f64;
    let sum_x: f64 = data.iter().sum();
    let j = |p: [f64; 2]| curvature_objective(which, n, sum_x, beta, p[0], p[1], &nodes);
    let mut best: Option<([f64; 2], f64)> = None;
    for start in [[0.05, -2.0], [0.5, -2.0], [1.0, -1.0], [-0.5, -3.0]] {
        let p = newton_2d(&j, start)?;
        let v = j(p);
        if best.is_none_or(|(_, bv)| v < bv) {
            best = Some((p, v));
        }
    }
    let (p, objective) = best.expect("at least one start");
    let var = (2.0 * p[1]).exp();
    let curvature = beta * (1.0 / var - 1.0);
    Ok(CurvatureFit {
        mu: p[0],
        var,
        effective_var: 1.0 / curvature,
        objective,
    })
}

/// [`curvature_probe_data`] on the seeded 1000-point standard-normal sample.
pub fn curvature_probe(beta: f64, which: CurvatureFn, seed: u64) -> Result<CurvatureFit> {
    curvature_probe_data(beta, which, &crate::data::gen_curvature_toy(seed))
}

fn newton_2d(f: &impl Fn([f64; 2]) -> f64, start: [f64; 2]) -> Result<[f64; 2]> {
    const H: f64 = 1e-4;
    let mut p = start;
    let mut fp = f(p);
    for _ in 0..500 {
        let at = |d0: f64, d1: f64| f([p[0] + d0, p[1] + d1]);
        let g = [(at(H, 0.0) - at(-H, 0.0)) / (2.0 * H), (at(0.0, H) - at(0.0, -H)) / (2.0 * H)];
        let h00 = (at(H, 0.0) - 2.0 * fp + at(-H, 0.0)) / (H * H);
        let h11 = (at(0.0, H) - 2.0 * fp + at(0.0, -H)) / (H * H);
        let h01 = (at(H, H) - at(H, -H) - at(-H, H) + at(-H, -H)) / (4.0 * H * H);
        if !(g[0].is_finite() && g[1].is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient at mu={}, log_sigma={}", p[0], p[1])));
        }
        if g[0].abs() < 1e-9 && g[1].abs() < 1e-9 {
            break;
        }
        let det = h00 * h11 - h01 * h01;
        let mut step = if h00 > 0.0 && det > 0.0 {
            [-(h11 * g[0] - h01 * g[1]) / det, -(h00 * g[1] - h01 * g[0]) / det]
        } else {
            let scale = 1.0 / (h00.abs() + h11.abs() + 1.0);
            [-g[0] * scale, -g[1] * scale]
        };
        let mut accepted = false;
        for _ in 0..60 {
            let cand = [p[0] + step[0], p[1] + step[1]];
            let fc = f(cand);
            if fc.is_finite() && fc <= fp {
                let moved = (cand[0] - p[0]).abs() + (cand[1] - p[1]).abs();
                p = cand;
                fp = fc;
                accepted = moved > 0.0;
                break;
            }
            step = [0.5 * step[0], 0.5 * step[1]];
        }
        if !accepted {
            break;
        }
    }
    if !fp.is_finite() {
        return Err(Error::Divergence("non-finite objective".into()));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_net, Architecture, NetInit};

    #[test]
    fn graph_kl_matches_closed_form() {
        let arch = Architecture::Mlp { input: 3, hidden: vec![4] };
        let init = NetInit { logvar: -2.0, weight_scale: 1.0 };
        let mut net = init_net(&arch, init, true, 1).unwrap();
        net.add_task(0, 2).unwrap();
        let other = init_net(&arch, NetInit { logvar: -4.0, ..init }, false, 2).unwrap();
        let prior = ClippedPrecisionPrior::new(other.posterior(), vec![1.0; other.posterior().dim()], 100.0).unwrap();
        let terms = KlTerms::new(&net, &prior, 1.0).unwrap();
        let mut g = Graph::new();
        let b = net.bind(&mut g, 0, ParamMode::Variational).unwrap();
        let node = terms.node(&mut g, &b).unwrap();
        let want = crate::gaussian::kl_lambda_tilde(&net.posterior(), &prior).unwrap();
        assert!((g.value(node).item() - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn conjugate_fit_matches_closed_form() {
        let ys: Vec<f64> = (0..40).map(|i| 0.3 + ((i * 7) % 11) as f64 / 10.0 - 0.5).collect();
        let n = ys.len() as f64;
        for beta in [0.05, 0.2, 1.0] {
            let q = conjugate_beta_vi(&ys, 1.0, 1.0, beta, 20000).unwrap();
            let precision = n / beta + 1.0;
            let mean = ys.iter().sum::<f64>() / beta / precision;
            assert!((1.0 / q.var()[0] / precision - 1.0).abs() < 1e-3, "beta {beta}: {}", 1.0 / q.var()[0]);
            assert!((q.mu()[0] - mean).abs() < 1e-4);
        }
    }

    #[test]
    fn quadrature_integrates_moments() {
        let nodes = gauss_legendre(96);
        let m2 = gaussian_expectation(0.3, 0.7, false, &nodes, |t| t * t);
        assert!((m2 - (0.09 + 0.49)).abs() < 1e-12);
        let abs = gaussian_expectation(0.0, 1.0, true, &nodes, f64::abs);
        assert!((abs - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ewc_penalty_by_hand() {
        let net = init_net(&Architecture::Logistic { input: 1 }, NetInit::default(), false, 0).unwrap();
        let mut net = net;
        net.add_task(0, 2).unwrap();
        net.shared[0].weight_mu = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        net.shared[0].bias_mu = Tensor::vector(vec![0.0]);
        let state = EwcState {
            fisher_acc: vec![1.0, 1.0],
            anchor: vec![0.0, 0.0],
            lambda: 1.0,
            gamma: 1.0,
        };
        let mut g = Graph::new();
        let b = net.bind(&mut g, 0, ParamMode::MeanOnly).unwrap();
        let zero = g.constant(Tensor::scalar(0.0));
        let loss = ewc_loss(&mut g, &b, zero, &state, 1).unwrap();
        assert_eq!(g.value(loss).item(), 0.5);
    }

    #[test]
    fn ewc_recursion() {
        let s = EwcState::new(vec![0.0; 2], 1.0, 0.5);
        let s = ewc_update_state(&s, &[2.0, 4.0], &[1.0, 1.0]).unwrap();
        let s = ewc_update_state(&s, &[2.0, 4.0], &[3.0, 2.0]).unwrap();
        assert_eq!(s.fisher_acc, vec![3.0, 6.0]);
        assert_eq!(s.anchor, vec![3.0, 2.0]);
        let clipped = ewc_update_state(&s, &[-1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(clipped.fisher_acc, vec![1.5, 3.0]);
    }

    #[test]
    fn empirical_fisher_single_logistic_example() {
        let mut net = init_net(&Architecture::Logistic { input: 2 }, NetInit::default(), false, 0).unwrap();
        net.add_task(0, 2).unwrap();
        net.shared[0].weight_mu = Tensor::zeros(&[2, 1]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let f = fisher_diag(&net, 0, &x, &[1], FisherMode::Empirical).unwrap();
        assert!((f[0] - 0.25).abs() < 1e-15 && (f[1] - 1.0).abs() < 1e-15);
        assert!((f[2] - 0.25).abs() < 1e-15);
    }
}
