//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every op evaluates eagerly, checks
//! its output for non-finite entries, and records enough state to run the
//! vector-Jacobian product during [`Graph::backward`]. Nodes are stored in
//! creation order, which is already a topological order.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ScaleShift {
        input: NodeId,
        scale: Option<NodeId>,
        shift: NodeId,
    },
    Reshape(NodeId),
    PadZeroLogit(NodeId),
    Reparam {
        mu: NodeId,
        logvar: NodeId,
        /// `exp(½ logvar) · ε`
        deviation: Vec<f64>,
    },
    DiagKl {
        mu: NodeId,
        logvar: NodeId,
        consts: Arc<DiagKlConstants>,
    },
}

/// Fixed coefficients of `½ Σ [ q·(μ − m)² + t·exp(logvar) − logvar ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagKlConstants {
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
    pub trace_weight: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if `id` influenced it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// `c (m×n) (+)= op(a) (m×k) · op(b) (k×n)`; `a_t`/`b_t` read the stored
/// matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, op: Op, value: Tensor, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(name, op, value, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let value = self.value(a).map(f);
        self.push(name, op, value, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplication by a fixed real.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", Op::Sum(a), value, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", Op::Mean(a), value, &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self
            .value(a)
            .reshape(shape)
            .map_err(|_| shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        self.push("reshape", Op::Reshape(a), value, &[a])
    }

    /// `(m×k) · (k×n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", Op::Matmul(a, b), value, &[a, b])
    }

    /// Square-kernel convolution over NCHW input with zero padding.
    /// `kernel` is `(out_channels, in_channels, k, k)`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || sk[1] != si[1] || sk[2] != sk[3] {
            return Err(shape_err("conv2d", format!("input {si:?} kernel {sk:?}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(shape_err("conv2d", format!("stride {stride} not in {{1, 2}}")));
        }
        let k = sk[2];
        if si[2] + 2 * padding < k || si[3] + 2 * padding < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {si:?}")));
        }
        let geom = ConvGeometry {
            batch: si[0],
            in_channels: si[1],
            height: si[2],
            width: si[3],
            out_channels: sk[0],
            kernel: k,
            stride,
            padding,
            out_h: (si[2] + 2 * padding - k) / stride + 1,
            out_w: (si[3] + 2 * padding - k) / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let o = geom.out_channels;
        let mut out = vec![0.0; geom.batch * o * ncols];
        let kdata = self.value(kernel).data();
        for n in 0..geom.batch {
            gemm(
                o,
                rows,
                ncols,
                kdata,
                false,
                &cols[n * rows * ncols..(n + 1) * rows * ncols],
                false,
                &mut out[n * o * ncols..(n + 1) * o * ncols],
                false,
            );
        }
        let value = Tensor::new(vec![geom.batch, o, geom.out_h, geom.out_w], out)?;
        self.push(
            "conv2d",
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            value,
            &[input, kernel],
        )
    }

    /// 2×2 max pooling with stride 2 over NCHW input (trailing odd row or
    /// column dropped).
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool2", format!("input {s:?}")));
        }
        let (oh, ow) = (s[2] / 2, s[3] / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..s[0] * s[1] {
            let base = plane * s[2] * s[3];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * s[3] + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * s[3] + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push("max_pool2", Op::MaxPool2 { input, argmax }, value, &[input])
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("target {bad} out of range for {c} classes"),
            ));
        }
        let (probs, nll) = softmax_rows(self.value(logits).data(), c, Some(targets));
        let value = Tensor::scalar(nll / s[0] as f64);
        self.push(
            "softmax_cross_entropy",
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            value,
            &[logits],
        )
    }

    /// `x * scale[c] + shift[c]` broadcast along axis 1 (features of a
    /// `(B, F)` matrix or channels of a `(B, C, H, W)` map).
    pub fn scale_shift(&mut self, input: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        self.broadcast_affine("scale_shift", input, Some(scale), shift)
    }

    /// `x + shift[c]` broadcast along axis 1.
    pub fn add_bias(&mut self, input: NodeId, shift: NodeId) -> Result<NodeId> {
        self.broadcast_affine("add_bias", input, None, shift)
    }

    fn broadcast_affine(
        &mut self,
        name: &'static str,
        input: NodeId,
        scale: Option<NodeId>,
        shift: NodeId,
    ) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(shape_err(name, format!("input {s:?} has no feature axis")));
        }
        let channels = s[1];
        for p in scale.iter().chain(std::iter::once(&shift)) {
            if self.shape(*p) != [channels] {
                return Err(shape_err(
                    name,
                    format!("parameter {:?} does not match axis 1 of {s:?}", self.shape(*p)),
                ));
            }
        }
        let inner: usize = s[2..].iter().product();
        let x = self.value(input).data();
        let b = self.value(shift).data();
        let g = scale.map(|id| self.value(id).data());
        let mut out = Vec::with_capacity(x.len());
        for (chunk_idx, chunk) in x.chunks(inner).enumerate() {
            let c = chunk_idx % channels;
            match g {
                Some(g) => out.extend(chunk.iter().map(|&v| v * g[c] + b[c])),
                None => out.extend(chunk.iter().map(|&v| v + b[c])),
            }
        }
        let value = Tensor::new(s, out)?;
        let mut inputs = vec![input, shift];
        inputs.extend(scale);
        self.push(name, Op::ScaleShift { input, scale, shift }, value, &inputs)
    }

    /// Maps a `(B, 1)` logit `z` to two-class logits `(B, 2) = [0, z]`.
    pub fn pad_zero_logit(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || s[1] != 1 {
            return Err(shape_err("pad_zero_logit", format!("input {s:?}")));
        }
        let data = self
            .value(input)
            .data()
            .iter()
            .flat_map(|&z| [0.0, z])
            .collect();
        let value = Tensor::new(vec![s[0], 2], data)?;
        self.push("pad_zero_logit", Op::PadZeroLogit(input), value, &[input])
    }

    /// `μ + exp(½ logvar) · ε` in one node.
    pub fn reparam(&mut self, mu: NodeId, logvar: NodeId, eps: &Tensor) -> Result<NodeId> {
        self.same_shape("reparam", mu, logvar)?;
        if eps.shape() != self.shape(mu) {
            return Err(shape_err("reparam", format!("noise {:?} vs {:?}", eps.shape(), self.shape(mu))));
        }
        let deviation: Vec<f64> = self
            .value(logvar)
            .data()
            .iter()
            .zip(eps.data())
            .map(|(lv, e)| (0.5 * lv).exp() * e)
            .collect();
        let data = self.value(mu).data().iter().zip(&deviation).map(|(m, d)| m + d).collect();
        let value = Tensor::new(self.shape(mu).to_vec(), data)?;
        self.push("reparam", Op::Reparam { mu, logvar, deviation }, value, &[mu, logvar])
    }

    /// Scalar `½ Σ [ q·(μ − m)² + t·exp(logvar) − logvar ]` over one tensor.
    pub fn diag_kl(&mut self, mu: NodeId, logvar: NodeId, consts: Arc<DiagKlConstants>) -> Result<NodeId> {
        self.same_shape("diag_kl", mu, logvar)?;
        let n = self.value(mu).len();
        if consts.mean.len() != n || consts.precision.len() != n || consts.trace_weight.len() != n {
            return Err(shape_err("diag_kl", format!("{n} parameters, {} coefficients", consts.mean.len())));
        }
        let (m, lv) = (self.value(mu).data(), self.value(logvar).data());
        let mut total = 0.0;
        for i in 0..n {
            let d = m[i] - consts.mean[i];
            total += consts.precision[i] * d * d + consts.trace_weight[i] * lv[i].exp() - lv[i];
        }
        let value = Tensor::scalar(0.5 * total);
        self.push("diag_kl", Op::DiagKl { mu, logvar, consts }, value, &[mu, logvar])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let elementwise = |a: NodeId, f: &dyn Fn(f64, f64) -> f64| {
            // f(input value, upstream grad)
            let x = val(a);
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(g.data()).map(|(&xv, &gv)| f(xv, gv)).collect(),
            )
            .expect("shape preserved")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = g.zip_map(val(*b), |gv, bv| gv * bv).expect("shape checked");
                    self.accumulate(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let d = g.zip_map(val(*a), |gv, av| gv * av).expect("shape checked");
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Relu(a) => self.accumulate(grads, *a, elementwise(*a, &|x, gv| if x > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).expect("shape preserved");
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y).expect("shape preserved");
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => self.accumulate(grads, *a, elementwise(*a, &|x, gv| gv / x)),
            Op::Square(a) => self.accumulate(grads, *a, elementwise(*a, &|x, gv| 2.0 * x * gv)),
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::Reshape(a) => {
                let d = g.reshape(val(*a).shape()).expect("same element count");
                self.accumulate(grads, *a, d);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut d, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], d).expect("shape"));
                }
                if self.requires_grad(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut d, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], d).expect("shape"));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (rows, ncols, o) = (geom.col_rows(), geom.col_cols(), geom.out_channels);
                if self.requires_grad(*kernel) {
                    let mut dk = vec![0.0; o * rows];
                    for n in 0..geom.batch {
                        gemm(
                            o,
                            ncols,
                            rows,
                            &g.data()[n * o * ncols..(n + 1) * o * ncols],
                            false,
                            &cols[n * rows * ncols..(n + 1) * rows * ncols],
                            true,
                            &mut dk,
                            true,
                        );
                    }
                    self.accumulate(grads, *kernel, Tensor::new(val(*kernel).shape().to_vec(), dk).expect("shape"));
                }
                if self.requires_grad(*input) {
                    let mut dcols = vec![0.0; rows * ncols];
                    let mut dx = vec![0.0; val(*input).len()];
                    for n in 0..geom.batch {
                        gemm(
                            rows,
                            o,
                            ncols,
                            val(*kernel).data(),
                            true,
                            &g.data()[n * o * ncols..(n + 1) * o * ncols],
                            false,
                            &mut dcols,
                            false,
                        );
                        col2im_add(&dcols, geom, n, &mut dx);
                    }
                    self.accumulate(grads, *input, Tensor::new(val(*input).shape().to_vec(), dx).expect("shape"));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0; val(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                self.accumulate(grads, *input, Tensor::new(val(*input).shape().to_vec(), dx).expect("shape"));
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let batch = targets.len();
                let c = probs.len() / batch;
                let scale = g.item() / batch as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![batch, c], d).expect("shape"));
            }
            Op::ScaleShift { input, scale, shift } => {
                let x = val(*input);
                let channels = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let gamma = scale.map(|s| val(s).data());
                let mut d_shift = vec![0.0; channels];
                let mut d_scale = vec![0.0; channels];
                let mut dx = Vec::with_capacity(x.len());
                for (chunk_idx, (xc, gc)) in x.data().chunks(inner).zip(g.data().chunks(inner)).enumerate() {
                    let c = chunk_idx % channels;
                    d_shift[c] += gc.iter().sum::<f64>();
                    match gamma {
                        Some(gm) => {
                            d_scale[c] += xc.iter().zip(gc).map(|(a, b)| a * b).sum::<f64>();
                            dx.extend(gc.iter().map(|&gv| gv * gm[c]));
                        }
                        None => dx.extend_from_slice(gc),
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx).expect("shape"));
                self.accumulate(grads, *shift, Tensor::vector(d_shift));
                if let Some(s) = scale {
                    self.accumulate(grads, *s, Tensor::vector(d_scale));
                }
            }
            Op::PadZeroLogit(a) => {
                let d: Vec<f64> = g.data().chunks(2).map(|r| r[1]).collect();
                let rows = d.len();
                self.accumulate(grads, *a, Tensor::new(vec![rows, 1], d).expect("shape"));
            }
            Op::Reparam { mu, logvar, deviation } => {
                self.accumulate(grads, *mu, g.clone());
                if self.requires_grad(*logvar) {
                    let d = g.data().iter().zip(deviation).map(|(gv, dv)| 0.5 * gv * dv).collect();
                    self.accumulate(grads, *logvar, Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::DiagKl { mu, logvar, consts } => {
                let gv = g.item();
                let shape = val(*mu).shape().to_vec();
                if self.requires_grad(*mu) {
                    let d = val(*mu)
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, m)| gv * consts.precision[i] * (m - consts.mean[i]))
                        .collect();
                    self.accumulate(grads, *mu, Tensor::new(shape.clone(), d).expect("shape"));
                }
                if self.requires_grad(*logvar) {
                    let d = val(*logvar)
                        .data()
                        .iter()
                        .zip(&consts.trace_weight)
                        .map(|(lv, t)| 0.5 * gv * (t * lv.exp() - 1.0))
                        .collect();
                    self.accumulate(grads, *logvar, Tensor::new(shape, d).expect("shape"));
                }
            }
        }
    }
}

/// Row-wise softmax; with `targets`, also returns the summed negative log
/// probability of the targets.
pub(crate) fn softmax_rows(logits: &[f64], classes: usize, targets: Option<&[usize]>) -> (Vec<f64>, f64) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut nll = 0.0;
    for (i, row) in logits.chunks(classes).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        if let Some(t) = targets {
            nll -= row[t[i]] - max - total.ln();
        }
        probs.extend(exps.iter().map(|e| e / total));
    }
    (probs, nll)
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; g.batch * rows * ncols];
    for n in 0..g.batch {
        let img = &x[n * g.in_channels * g.height * g.width..];
        let out = &mut cols[n * rows * ncols..(n + 1) * rows * ncols];
        for c in 0..g.in_channels {
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let r = (c * g.kernel + ki) * g.kernel + kj;
                    for oi in 0..g.out_h {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= g.height as isize {
                            continue;
                        }
                        for oj in 0..g.out_w {
                            let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                            if jj < 0 || jj >= g.width as isize {
                                continue;
                            }
                            out[r * ncols + oi * g.out_w + oj] =
                                img[(c * g.height + ii as usize) * g.width + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeometry, n: usize, dx: &mut [f64]) {
    let ncols = g.col_cols();
    let img = &mut dx[n * g.in_channels * g.height * g.width..];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj >= g.width as isize {
                            continue;
                        }
                        img[(c * g.height + ii as usize) * g.width + jj as usize] +=
                            dcols[r * ncols + oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_of_ones_sums_neighbourhood() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, k, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 1, 3, 3]);
        assert_eq!(v.data()[4], 9.0);
        assert_eq!(v.data()[0], 4.0);
    }

    #[test]
    fn square_derivative_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 5.0, 2.0, 3.0]));
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
