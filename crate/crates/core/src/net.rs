//! Mean-field Bayesian networks with per-task FiLM sites and heads.
//!
//! Shared layers carry a diagonal Gaussian over every weight and bias,
//! stored as mean and log-variance tensors. Each task owns a set of FiLM
//! parameters (one scale and shift per hidden unit or filter, applied after
//! the affine map and before the ReLU) and a point-estimate head.
//!
//! A forward pass binds the parameters into a [`Graph`] and samples
//! `θ = μ + exp(½·logvar)·ε` with one `ε` per parameter shared across the
//! batch.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, NodeId};
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::tensor::Tensor;

/// Network layout shared by every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Dense ReLU layers of the given widths.
    Mlp { input: usize, hidden: Vec<usize> },
    /// 3×3 same-padded convolutions, each followed by ReLU and 2×2 max
    /// pooling, then one dense ReLU layer.
    Conv {
        in_channels: usize,
        height: usize,
        width: usize,
        filters: Vec<usize>,
        dense: usize,
    },
    /// A single linear unit `σ(wᵀx + b)`; no hidden layers and no head.
    Logistic { input: usize },
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Architecture(m.to_string()));
        match self {
            Architecture::Mlp { input, hidden } => {
                if *input == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return bad("mlp needs a positive input size and at least one positive hidden width");
                }
            }
            Architecture::Conv {
                in_channels,
                height,
                width,
                filters,
                dense,
            } => {
                if *in_channels == 0 || filters.is_empty() || filters.contains(&0) || *dense == 0 {
                    return bad("conv needs positive channels, at least one filter bank and a dense width");
                }
                let shrink = 1usize << filters.len();
                if height / shrink == 0 || width / shrink == 0 {
                    return bad("input too small for the number of pooling stages");
                }
            }
            Architecture::Logistic { input } => {
                if *input == 0 {
                    return bad("logistic model needs a positive input size");
                }
            }
        }
        Ok(())
    }

    /// Flattened input features expected per example.
    pub fn input_features(&self) -> usize {
        match self {
            Architecture::Mlp { input, .. } | Architecture::Logistic { input } => *input,
            Architecture::Conv {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
        }
    }

    fn shared_kinds(&self) -> Vec<LayerKind> {
        match self {
            Architecture::Mlp { input, hidden } => {
                let mut prev = *input;
                hidden
                    .iter()
                    .map(|&h| {
                        let k = LayerKind::Dense { inputs: prev, outputs: h };
                        prev = h;
                        k
                    })
                    .collect()
            }
            Architecture::Conv {
                in_channels,
                height,
                width,
                filters,
                dense,
            } => {
                let mut kinds = Vec::new();
                let (mut c, mut h, mut w) = (*in_channels, *height, *width);
                for &f in filters {
                    kinds.push(LayerKind::Conv {
                        in_channels: c,
                        out_channels: f,
                        kernel: 3,
                    });
                    c = f;
                    h /= 2;
                    w /= 2;
                }
                kinds.push(LayerKind::Dense {
                    inputs: c * h * w,
                    outputs: *dense,
                });
                kinds
            }
            Architecture::Logistic { input } => vec![LayerKind::Dense {
                inputs: *input,
                outputs: 1,
            }],
        }
    }

    /// Width of the representation fed to the task heads.
    fn head_inputs(&self) -> Option<usize> {
        match self {
            Architecture::Mlp { hidden, .. } => hidden.last().copied(),
            Architecture::Conv { dense, .. } => Some(*dense),
            Architecture::Logistic { .. } => None,
        }
    }

    /// Units per FiLM site, one site per hidden layer.
    pub fn film_sites(&self) -> Vec<usize> {
        match self {
            Architecture::Logistic { .. } => Vec::new(),
            _ => self.shared_kinds().iter().map(LayerKind::outputs).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
}

impl LayerKind {
    pub fn outputs(&self) -> usize {
        match self {
            LayerKind::Dense { outputs, .. } => *outputs,
            LayerKind::Conv { out_channels, .. } => *out_channels,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![inputs, outputs],
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
            } => vec![out_channels, in_channels, kernel, kernel],
        }
    }

    /// Indices into the flattened weight tensor feeding output unit `j`.
    fn incoming(&self, j: usize) -> Vec<usize> {
        match *self {
            LayerKind::Dense { inputs, outputs } => (0..inputs).map(|i| i * outputs + j).collect(),
            LayerKind::Conv { .. } => {
                let fan = self.fan_in();
                (j * fan..(j + 1) * fan).collect()
            }
        }
    }
}

/// Diagonal Gaussian over one layer's weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldLayer {
    pub kind: LayerKind,
    pub weight_mu: Tensor,
    pub weight_logvar: Tensor,
    pub bias_mu: Tensor,
    pub bias_logvar: Tensor,
}

/// Per-task feature-wise affine modulation for one site.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl FilmParams {
    pub fn identity(units: usize) -> Self {
        Self {
            scale: Tensor::ones(&[units]),
            shift: Tensor::zeros(&[units]),
        }
    }
}

/// Point-estimate output layer owned by one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub classes: usize,
    pub film: Vec<FilmParams>,
    pub head: Option<Head>,
}

/// Initialization of the variational parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetInit {
    /// Initial log-variance of every shared weight and bias.
    pub logvar: f64,
    /// Weight means are drawn from `N(0, weight_scale² / fan_in)`.
    pub weight_scale: f64,
}

impl Default for NetInit {
    fn default() -> Self {
        Self {
            logvar: (1e-6f64).ln(),
            weight_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    arch: Architecture,
    film: bool,
    init: NetInit,
    seed: u64,
    pub shared: Vec<MeanFieldLayer>,
    pub tasks: BTreeMap<usize, TaskParams>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches length")
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds a network with no tasks attached.
pub fn init_net(arch: &Architecture, init: NetInit, film: bool, seed: u64) -> Result<VariationalNet> {
    arch.validate()?;
    if !init.logvar.is_finite() || !(init.weight_scale >= 0.0) {
        return Err(Error::InvalidArgument("initial logvar and weight scale must be finite".into()));
    }
    let mut rng = seeded_rng(seed, 0);
    let shared = arch
        .shared_kinds()
        .into_iter()
        .map(|kind| {
            let shape = kind.weight_shape();
            let std = init.weight_scale / (kind.fan_in() as f64).sqrt();
            let out = kind.outputs();
            MeanFieldLayer {
                kind,
                weight_mu: normal_tensor(&mut rng, &shape, std),
                weight_logvar: Tensor::full(&shape, init.logvar),
                bias_mu: Tensor::zeros(&[out]),
                bias_logvar: Tensor::full(&[out], init.logvar),
            }
        })
        .collect();
    Ok(VariationalNet {
        arch: arch.clone(),
        film,
        init,
        seed,
        shared,
        tasks: BTreeMap::new(),
    })
}

/// How a binding exposes parameters to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// Means, log-variances, FiLM and head are all trainable.
    Variational,
    /// Means, FiLM and head are trainable; log-variances are not bound.
    MeanOnly,
    /// Everything is a constant.
    Frozen,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub weight_mu: NodeId,
    pub weight_logvar: Option<NodeId>,
    pub bias_mu: NodeId,
    pub bias_logvar: Option<NodeId>,
}

/// Graph handles for the parameters touched by one task.
#[derive(Debug, Clone)]
pub struct Binding {
    pub task: usize,
    pub mode: ParamMode,
    pub shared: Vec<LayerNodes>,
    pub film: Vec<(NodeId, NodeId)>,
    pub head: Option<(NodeId, NodeId)>,
}

impl Binding {
    /// Trainable nodes in the order used by [`VariationalNet::trainable_mut`].
    pub fn trainable(&self) -> Vec<NodeId> {
        if self.mode == ParamMode::Frozen {
            return Vec::new();
        }
        let mut out = Vec::new();
        for l in &self.shared {
            out.push(l.weight_mu);
            out.extend(l.weight_logvar);
            out.push(l.bias_mu);
            out.extend(l.bias_logvar);
        }
        for &(s, b) in &self.film {
            out.push(s);
            out.push(b);
        }
        if let Some((w, b)) = self.head {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Source of the reparameterization noise.
pub enum Noise<'a> {
    /// `ε = 0`: the mean network.
    Zero,
    /// One standard-normal draw per parameter.
    Draw(&'a mut ChaCha8Rng),
}

/// Prediction strategy for [`VariationalNet::predict`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    Sampled,
    Mean,
}

/// Per-unit deviation of one shared layer from the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitDiagnostics {
    /// Mean symmetric KL between weight posterior and prior over each
    /// unit's incoming weights.
    pub score: Vec<f64>,
    /// Effective bias mean for the requested task, FiLM included.
    pub bias_mean: Vec<f64>,
}

impl UnitDiagnostics {
    pub fn active(&self, threshold: f64) -> usize {
        self.score.iter().filter(|&&s| s > threshold).count()
    }
}

fn sym_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * (v1 / v2 + v2 / v1 - 2.0 + (m1 - m2).powi(2) * (1.0 / v1 + 1.0 / v2))
}

impl VariationalNet {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn film_enabled(&self) -> bool {
        self.film
    }

    pub fn init(&self) -> NetInit {
        self.init
    }

    pub fn has_task(&self, task: usize) -> bool {
        self.tasks.contains_key(&task)
    }

    /// Attaches fresh FiLM parameters and a fresh head for `task`. Existing
    /// tasks are left untouched; re-adding a known task is an error.
    pub fn add_task(&mut self, task: usize, classes: usize) -> Result<()> {
        if self.tasks.contains_key(&task) {
            return Err(Error::InvalidArgument(format!("task {task} already exists")));
        }
        let head = match self.arch.head_inputs() {
            Some(inputs) => {
                if classes < 2 {
                    return Err(Error::InvalidArgument(format!("task {task} needs at least 2 classes")));
                }
                let mut rng = seeded_rng(self.seed, 1 + task as u64);
                let std = self.init.weight_scale / (inputs as f64).sqrt();
                Some(Head {
                    weight: normal_tensor(&mut rng, &[inputs, classes], std),
                    bias: Tensor::zeros(&[classes]),
                })
            }
            None => {
                if classes != 2 {
                    return Err(Error::InvalidArgument("the logistic model is binary".into()));
                }
                None
            }
        };
        let film = if self.film {
            self.arch.film_sites().into_iter().map(FilmParams::identity).collect()
        } else {
            Vec::new()
        };
        self.tasks.insert(task, TaskParams { classes, film, head });
        Ok(())
    }

    pub fn task_params(&self, task: usize) -> Result<&TaskParams> {
        self.tasks.get(&task).ok_or(Error::UnknownTask(task))
    }

    pub fn bind(&self, g: &mut Graph, task: usize, mode: ParamMode) -> Result<Binding> {
        let tp = self.task_params(task)?;
        let train = mode != ParamMode::Frozen;
        let leaf = |g: &mut Graph, t: &Tensor, trainable: bool| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let shared = self
            .shared
            .iter()
            .map(|l| {
                let var = |g: &mut Graph, t: &Tensor| match mode {
                    ParamMode::Variational => Some(g.param(t.clone())),
                    ParamMode::MeanOnly => None,
                    ParamMode::Frozen => Some(g.constant(t.clone())),
                };
                let weight_mu = leaf(g, &l.weight_mu, train);
                let weight_logvar = var(g, &l.weight_logvar);
                let bias_mu = leaf(g, &l.bias_mu, train);
                let bias_logvar = var(g, &l.bias_logvar);
                LayerNodes {
                    weight_mu,
                    weight_logvar,
                    bias_mu,
                    bias_logvar,
                }
            })
            .collect();
        let film = tp
            .film
            .iter()
            .map(|f| (leaf(g, &f.scale, train), leaf(g, &f.shift, train)))
            .collect();
        let head = tp
            .head
            .as_ref()
            .map(|h| (leaf(g, &h.weight, train), leaf(g, &h.bias, train)));
        Ok(Binding {
            task,
            mode,
            shared,
            film,
            head,
        })
    }

    /// Mutable parameter tensors matching [`Binding::trainable`].
    pub fn trainable_mut(&mut self, task: usize, mode: ParamMode) -> Result<Vec<&mut Tensor>> {
        if mode == ParamMode::Frozen {
            return Ok(Vec::new());
        }
        let tp = self.tasks.get_mut(&task).ok_or(Error::UnknownTask(task))?;
        let mut out = Vec::new();
        for l in &mut self.shared {
            out.push(&mut l.weight_mu);
            if mode == ParamMode::Variational {
                out.push(&mut l.weight_logvar);
            }
            out.push(&mut l.bias_mu);
            if mode == ParamMode::Variational {
                out.push(&mut l.bias_logvar);
            }
        }
        for f in &mut tp.film {
            out.push(&mut f.scale);
            out.push(&mut f.shift);
        }
        if let Some(h) = &mut tp.head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        Ok(out)
    }

    fn sample(g: &mut Graph, mu: NodeId, logvar: Option<NodeId>, noise: &mut Noise) -> Result<NodeId> {
        let (Noise::Draw(rng), Some(lv)) = (noise, logvar) else {
            return Ok(mu);
        };
        let shape = g.value(mu).shape().to_vec();
        let eps = normal_tensor(rng, &shape, 1.0);
        g.reparam(mu, lv, &eps)
    }

    /// Logits of shape `(batch, classes)` for a `(batch, features)` input.
    pub fn forward(&self, g: &mut Graph, b: &Binding, x: NodeId, noise: &mut Noise) -> Result<NodeId> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 2 || s[1] != self.arch.input_features() {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("input {s:?}, expected (batch, {})", self.arch.input_features()),
            });
        }
        let batch = s[0];
        let mut h = x;
        if let Architecture::Conv {
            in_channels,
            height,
            width,
            ..
        } = self.arch
        {
            h = g.reshape(h, &[batch, in_channels, height, width])?;
        }
        for (i, (layer, nodes)) in self.shared.iter().zip(&b.shared).enumerate() {
            let w = Self::sample(g, nodes.weight_mu, nodes.weight_logvar, noise)?;
            let bias = Self::sample(g, nodes.bias_mu, nodes.bias_logvar, noise)?;
            let z = match layer.kind {
                LayerKind::Dense { .. } => {
                    if g.value(h).shape().len() != 2 {
                        let flat = g.value(h).len() / batch;
                        h = g.reshape(h, &[batch, flat])?;
                    }
                    g.matmul(h, w)?
                }
                LayerKind::Conv { .. } => g.conv2d(h, w, 1, 1)?,
            };
            let mut z = g.add_bias(z, bias)?;
            if matches!(self.arch, Architecture::Logistic { .. }) {
                return g.pad_zero_logit(z);
            }
            if let Some(&(scale, shift)) = b.film.get(i) {
                z = g.scale_shift(z, scale, shift)?;
            }
            h = g.relu(z)?;
            if matches!(layer.kind, LayerKind::Conv { .. }) {
                h = g.max_pool2(h)?;
            }
        }
        let (w, bias) = b.head.ok_or_else(|| Error::Architecture("missing head".into()))?;
        let z = g.matmul(h, w)?;
        g.add_bias(z, bias)
    }

    /// Logits for `x` under one noise draw, evaluated without gradients.
    pub fn forward_sample(&self, task: usize, x: &Tensor, noise: &mut Noise) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, task, ParamMode::Frozen)?;
        let xn = g.constant(x.clone());
        let out = self.forward(&mut g, &b, xn, noise)?;
        Ok(g.value(out).clone())
    }

    /// Class probabilities averaged over `num_samples` posterior draws, or a
    /// single `ε = 0` pass in [`PredictMode::Mean`].
    pub fn predict(
        &self,
        task: usize,
        x: &Tensor,
        num_samples: usize,
        mode: PredictMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if num_samples == 0 {
            return Err(Error::InvalidArgument("num_samples must be at least 1".into()));
        }
        let passes = if mode == PredictMode::Mean { 1 } else { num_samples };
        let mut acc: Option<Vec<f64>> = None;
        let mut shape = Vec::new();
        for _ in 0..passes {
            let mut noise = match mode {
                PredictMode::Mean => Noise::Zero,
                PredictMode::Sampled => Noise::Draw(rng),
            };
            let logits = self.forward_sample(task, x, &mut noise)?;
            shape = logits.shape().to_vec();
            let (probs, _) = softmax_rows(logits.data(), shape[1], None);
            match &mut acc {
                None => acc = Some(probs),
                Some(a) => a.iter_mut().zip(&probs).for_each(|(a, p)| *a += p),
            }
        }
        let inv = 1.0 / passes as f64;
        let data = acc.unwrap_or_default().into_iter().map(|p| p * inv).collect();
        Tensor::new(shape, data)
    }

    /// Number of scalar parameters in each shared tensor, in posterior order
    /// (weight then bias for every layer).
    pub fn shared_sizes(&self) -> Vec<usize> {
        self.shared
            .iter()
            .flat_map(|l| [l.weight_mu.len(), l.bias_mu.len()])
            .collect()
    }

    /// Flattened posterior over all shared parameters.
    pub fn posterior(&self) -> DiagGaussian {
        let mut mu = Vec::new();
        let mut var = Vec::new();
        for l in &self.shared {
            mu.extend_from_slice(l.weight_mu.data());
            var.extend(l.weight_logvar.data().iter().map(|v| v.exp()));
            mu.extend_from_slice(l.bias_mu.data());
            var.extend(l.bias_logvar.data().iter().map(|v| v.exp()));
        }
        DiagGaussian::new(mu, var).expect("exp of finite logvar is positive")
    }

    /// Flattened shared means, in posterior order.
    pub fn shared_means(&self) -> Vec<f64> {
        self.shared
            .iter()
            .flat_map(|l| l.weight_mu.data().iter().chain(l.bias_mu.data()).copied())
            .collect()
    }

    /// Per-layer, per-unit deviation from `prior` (flattened in posterior
    /// order).
    pub fn prune_diagnostics(&self, prior: &DiagGaussian, task: usize) -> Result<Vec<UnitDiagnostics>> {
        let tp = self.task_params(task)?;
        let total: usize = self.shared_sizes().iter().sum();
        if prior.dim() != total {
            return Err(Error::Dimension(total, prior.dim()));
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.shared.len());
        for (i, l) in self.shared.iter().enumerate() {
            let (pm, pv) = (&prior.mu()[offset..], &prior.var()[offset..]);
            let wm = l.weight_mu.data();
            let wv = l.weight_logvar.data();
            let units = l.kind.outputs();
            let score = (0..units)
                .map(|j| {
                    let idx = l.kind.incoming(j);
                    idx.iter()
                        .map(|&k| sym_kl(wm[k], wv[k].exp(), pm[k], pv[k]))
                        .sum::<f64>()
                        / idx.len() as f64
                })
                .collect();
            let bias_mean = (0..units)
                .map(|j| {
                    let b = l.bias_mu.data()[j];
                    match tp.film.get(i) {
                        Some(f) => f.scale.data()[j] * b + f.shift.data()[j],
                        None => b,
                    }
                })
                .collect();
            offset += wm.len() + l.bias_mu.len();
            out.push(UnitDiagnostics { score, bias_mean });
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = BTreeMap::new();
        for (i, l) in self.shared.iter().enumerate() {
            params.insert(format!("shared.{i}.weight_mu"), l.weight_mu.clone());
            params.insert(format!("shared.{i}.weight_logvar"), l.weight_logvar.clone());
            params.insert(format!("shared.{i}.bias_mu"), l.bias_mu.clone());
            params.insert(format!("shared.{i}.bias_logvar"), l.bias_logvar.clone());
        }
        let mut classes = BTreeMap::new();
        for (t, tp) in &self.tasks {
            classes.insert(*t, tp.classes);
            for (s, f) in tp.film.iter().enumerate() {
                params.insert(format!("task.{t}.film.{s}.scale"), f.scale.clone());
                params.insert(format!("task.{t}.film.{s}.shift"), f.shift.clone());
            }
            if let Some(h) = &tp.head {
                params.insert(format!("task.{t}.head.weight"), h.weight.clone());
                params.insert(format!("task.{t}.head.bias"), h.bias.clone());
            }
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            film: self.film,
            init: self.init,
            seed: self.seed,
            task_classes: classes,
            params,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        let mut net = init_net(&c.architecture, c.init, c.film, c.seed)?;
        let take = |key: String, like: &Tensor| -> Result<Tensor> {
            let t = c
                .params
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!("{key} has shape {:?}, expected {:?}", t.shape(), like.shape())));
            }
            Ok(t.clone())
        };
        for (i, l) in net.shared.iter_mut().enumerate() {
            l.weight_mu = take(format!("shared.{i}.weight_mu"), &l.weight_mu)?;
            l.weight_logvar = take(format!("shared.{i}.weight_logvar"), &l.weight_logvar)?;
            l.bias_mu = take(format!("shared.{i}.bias_mu"), &l.bias_mu)?;
            l.bias_logvar = take(format!("shared.{i}.bias_logvar"), &l.bias_logvar)?;
        }
        for (&t, &classes) in &c.task_classes {
            net.add_task(t, classes)?;
            let tp = net.tasks.get_mut(&t).expect("task just added");
            for (s, f) in tp.film.iter_mut().enumerate() {
                f.scale = take(format!("task.{t}.film.{s}.scale"), &f.scale)?;
                f.shift = take(format!("task.{t}.film.{s}.shift"), &f.shift)?;
            }
            if let Some(h) = &mut tp.head {
                h.weight = take(format!("task.{t}.head.weight"), &h.weight)?;
                h.bias = take(format!("task.{t}.head.bias"), &h.bias)?;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_checkpoint(&c)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized network: parameter path to tensor, floats stored as hex bit
/// patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub film: bool,
    pub init: NetInit,
    pub seed: u64,
    pub task_classes: BTreeMap<usize, usize>,
    pub params: BTreeMap<String, Tensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Architecture {
        Architecture::Mlp {
            input: 4,
            hidden: vec![3, 3],
        }
    }

    fn input(batch: usize, features: usize) -> Tensor {
        let data = (0..batch * features).map(|i| ((i * 37 % 11) as f64) / 11.0 - 0.4).collect();
        Tensor::new(vec![batch, features], data).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_net(&mlp(), NetInit::default(), true, 5).unwrap();
        let b = init_net(&mlp(), NetInit::default(), true, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn film_scale_and_shift_act_before_relu() {
        let mut net = init_net(&Architecture::Mlp { input: 2, hidden: vec![2] }, NetInit::default(), true, 0).unwrap();
        net.shared[0].weight_mu = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        net.add_task(0, 2).unwrap();
        let tp = net.tasks.get_mut(&0).unwrap();
        tp.film[0].scale = Tensor::vector(vec![2.0, 2.0]);
        tp.film[0].shift = Tensor::vector(vec![1.0, 1.0]);
        tp.head = Some(Head {
            weight: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            bias: Tensor::zeros(&[2]),
        });
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let out = net.forward_sample(0, &x, &mut Noise::Zero).unwrap();
        assert_eq!(out.data(), &[3.0, 5.0]);
    }

    #[test]
    fn unknown_task_is_an_error() {
        let net = init_net(&mlp(), NetInit::default(), false, 0).unwrap();
        let err = net.forward_sample(3, &input(2, 4), &mut Noise::Zero).unwrap_err();
        assert!(matches!(err, Error::UnknownTask(3)));
    }

    #[test]
    fn predict_rows_sum_to_one() {
        let mut net = init_net(&mlp(), NetInit::default(), true, 1).unwrap();
        net.add_task(0, 3).unwrap();
        let mut rng = seeded_rng(0, 9);
        let p = net.predict(0, &input(5, 4), 7, PredictMode::Sampled, &mut rng).unwrap();
        for row in p.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = init_net(
            &Architecture::Conv {
                in_channels: 1,
                height: 6,
                width: 6,
                filters: vec![2],
                dense: 3,
            },
            NetInit::default(),
            true,
            4,
        )
        .unwrap();
        net.add_task(0, 2).unwrap();
        net.add_task(1, 3).unwrap();
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back = VariationalNet::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn unit_equal_to_prior_scores_zero() {
        let arch = Architecture::Mlp { input: 2, hidden: vec![2] };
        let mut net = init_net(&arch, NetInit { logvar: 0.0, weight_scale: 0.0 }, false, 0).unwrap();
        net.add_task(0, 2).unwrap();
        net.shared[0].weight_mu = Tensor::from_rows(&[vec![0.0, 3.0], vec![0.0, -1.0]]).unwrap();
        let prior = DiagGaussian::isotropic(6, 0.0, 1.0).unwrap();
        let d = net.prune_diagnostics(&prior, 0).unwrap();
        assert_eq!(d[0].score[0], 0.0);
        assert!(d[0].score[1] > 0.0);
    }
}
