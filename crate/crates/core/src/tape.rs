//! Reverse-mode differentiation over a recorded tape.
//!
//! Each operation appends a node holding its output value and enough saved
//! state to compute vector-Jacobian products. Node indices only ever grow,
//! so the tape order is already a topological order and [`Tape::backward`]
//! is a single reverse sweep that touches each node once.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, PoolGeometry};
use crate::tensor::Tensor;

pub use crate::kernels::PoolKind;

/// Clamp applied to probabilities before the logarithm in [`Tape::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Train,
    Inference,
}

/// Convolution weights and geometry. `floor_output` lets the window skip a
/// trailing remainder instead of rejecting a non-integral output extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub floor_output: bool,
}

impl ConvParams {
    pub fn new(weight: Var) -> Self {
        Self {
            weight,
            bias: None,
            stride: (1, 1),
            padding: (0, 0),
            floor_output: false,
        }
    }

    pub fn with_bias(mut self, bias: Var) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = (stride, stride);
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = (padding, padding);
        self
    }

    pub fn with_floor_output(mut self, floor: bool) -> Self {
        self.floor_output = floor;
        self
    }
}

/// Batch-norm running statistics and hyperparameters. Scale and shift are
/// ordinary tape variables passed alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl RunningStats {
    pub const DEFAULT_EPSILON: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            epsilon: Self::DEFAULT_EPSILON,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Pool {
        input: Var,
        kind: PoolKind,
        geometry: PoolGeometry,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Concat(Vec<Var>),
    Sigmoid(Var),
    Bce {
        scores: Var,
        labels: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Values are immutable once pushed; only the
/// gradient slots change, and only through [`Tape::backward`] and
/// [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, `None` until a backward pass reaches `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, params: ConvParams) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(params.weight);
        let in_dims = x.dims4("conv2d")?;
        let w_dims = w.dims4("conv2d")?;
        let geometry = ConvGeometry::new(in_dims, w_dims, params.stride, params.padding, params.floor_output)?;
        let bias = match params.bias {
            Some(b) => {
                let bt = self.value(b);
                if bt.shape() != [w_dims[0]] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: w_dims.to_vec(),
                        rhs: bt.shape().to_vec(),
                    });
                }
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geometry, x.data(), w.data(), bias);
        let value = Tensor::new(geometry.output_shape(), out)?;
        let mut deps = vec![input, params.weight];
        deps.extend(params.bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight: params.weight,
                bias: params.bias,
                geometry,
            },
        ))
    }

    /// Per-channel normalization. In training mode batch statistics are used
    /// (biased variance) and `stats` is updated by an exponential moving
    /// average with the unbiased variance; in inference mode `stats` is read.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("batch_norm2d")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm2d",
                    lhs: x.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d running stats",
                lhs: x.shape().to_vec(),
                rhs: vec![stats.mean.len()],
            });
        }
        let plane = h * w;
        let count = n * plane;
        if count == 0 {
            return Err(Error::Empty { op: "batch_norm2d" });
        }
        if mode == Mode::Train && count < 2 {
            return Err(Error::InvalidArgument(alloc::format!(
                "batch_norm2d: training mode needs at least 2 values per channel, got {count}"
            )));
        }
        let xs = x.data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut normalized = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for b in 0..n {
                        sum += xs[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        for &v in &xs[(b * c + ch) * plane..][..plane] {
                            sq += (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / count as f64;
                    let unbiased = sq / (count - 1) as f64;
                    let m = stats.momentum;
                    stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean;
                    stats.var[ch] = (1.0 - m) * stats.var[ch] + m * unbiased;
                    (mean, var)
                }
                Mode::Inference => (stats.mean[ch], stats.var[ch]),
            };
            let is = 1.0 / libm::sqrt(var + stats.epsilon);
            inv_std[ch] = is;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xs[i] - mean) * is;
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }

    /// max(x, 0); NaN passes through.
    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect())
            .expect("same shape");
        let rg = self.requires_grad(input);
        self.push(out, rg, Op::Relu(input))
    }

    pub fn pool2d(
        &mut self,
        input: Var,
        kind: PoolKind,
        window: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let x = self.value(input);
        let [n, c, _, _] = x.dims4("pool2d")?;
        let geometry = PoolGeometry::new(x.dims4("pool2d")?, window, stride, padding)?;
        let (out, argmax) = kernels::pool2d_forward(&geometry, kind, x.data());
        let value = Tensor::new([n, c, geometry.out_h, geometry.out_w], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(
            value,
            rg,
            Op::Pool {
                input,
                kind,
                geometry,
                argmax,
            },
        ))
    }

    /// N×C×H×W → N×C spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("global_avg_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::Empty { op: "global_avg_pool" });
        }
        let out = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new([n, c], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::GlobalAvgPool(input)))
    }

    /// `input (N×F) · weight (F×G) + bias (G)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, f, g) = match (x.shape(), w.shape(), b.shape()) {
            ([n, f], [f2, g], [g2]) if f == f2 && g == g2 => (*n, *f, *g),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: x.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                })
            }
        };
        let (xs, ws, bs) = (x.data(), w.data(), b.data());
        let mut out = Vec::with_capacity(n * g);
        for r in 0..n {
            for col in 0..g {
                let mut acc = bs[col];
                for k in 0..f {
                    acc += xs[r * f + k] * ws[k * g + col];
                }
                out.push(acc);
            }
        }
        let value = Tensor::new([n, g], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    /// Concatenates N×Cᵢ×H×W inputs along the channel axis, in order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty { op: "concat_channels" })?;
        let [n, _, h, w] = self.value(first).dims4("concat_channels")?;
        let mut total = 0;
        for (index, &v) in inputs.iter().enumerate() {
            let t = self.value(v);
            match t.shape() {
                &[n2, c, h2, w2] if n2 == n && h2 == h && w2 == w => total += c,
                other => {
                    return Err(Error::ConcatMismatch {
                        index,
                        expected: self.shape(first).to_vec(),
                        found: other.to_vec(),
                    })
                }
            }
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new([n, total, h, w], out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, rg, Op::Concat(inputs.to_vec())))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid(v)).collect())
            .expect("same shape");
        let rg = self.requires_grad(input);
        self.push(out, rg, Op::Sigmoid(input))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    pub fn bce_loss(&mut self, scores: Var, labels: &[f64]) -> Result<Var> {
        let p = self.value(scores);
        if p.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: labels.len(),
            });
        }
        if p.is_empty() {
            return Err(Error::Empty { op: "bce_loss" });
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &y)| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidLabel { index, value });
        }
        let mut total = 0.0;
        for (&pi, &y) in p.data().iter().zip(labels) {
            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= y * libm::log(pc) + (1.0 - y) * libm::log(1.0 - pc);
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        let rg = self.requires_grad(scores);
        Ok(self.push(
            value,
            rg,
            Op::Bce {
                scores,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total), rg, Op::Sum(input))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, rg, Op::Reshape(input)))
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    /// Accumulates d`loss`/d`v` into the gradient slot of every node that
    /// requires a gradient. Calling it twice without [`Tape::zero_grads`]
    /// adds the second pass on top of the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(upstream) = pending[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &upstream, &mut pending);
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(g) => {
                    for (a, u) in g.data_mut().iter_mut().zip(&upstream) {
                        *a += u;
                    }
                }
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), upstream)?);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, up: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut send = |v: Var, grad: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match pending[v.0].as_mut() {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grad) {
                        *a += g;
                    }
                }
                None => pending[v.0] = Some(grad),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let grads =
                    kernels::conv2d_backward(geometry, val(*input), val(*weight), up, wants(*input), wants(*weight));
                if let Some(g) = grads.input {
                    send(*input, g);
                }
                if let Some(g) = grads.weight {
                    send(*weight, g);
                }
                if let Some(b) = bias {
                    send(*b, grads.bias);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = nodes[input.0].value.dims4("batch_norm2d").expect("checked");
                let plane = h * w;
                let count = (n * plane) as f64;
                let g = val(*gamma);
                let mut d_gamma = vec![0.0; c];
                let mut d_beta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for k in off..off + plane {
                            d_gamma[ch] += up[k] * normalized[k];
                            d_beta[ch] += up[k];
                        }
                    }
                }
                if wants(*input) {
                    let mut dx = vec![0.0; up.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let scale = g[ch] * inv_std[ch];
                            for k in off..off + plane {
                                dx[k] = if *batch_stats {
                                    scale * (up[k] - d_beta[ch] / count - normalized[k] * d_gamma[ch] / count)
                                } else {
                                    scale * up[k]
                                };
                            }
                        }
                    }
                    send(*input, dx);
                }
                send(*gamma, d_gamma);
                send(*beta, d_beta);
            }
            Op::Relu(input) => {
                let g = val(*input)
                    .iter()
                    .zip(up)
                    .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
                    .collect();
                send(*input, g);
            }
            Op::Pool {
                input,
                kind,
                geometry,
                argmax,
            } => send(*input, kernels::pool2d_backward(geometry, *kind, argmax, up)),
            Op::GlobalAvgPool(input) => {
                let [_, _, h, w] = nodes[input.0].value.dims4("global_avg_pool").expect("checked");
                let plane = h * w;
                let mut g = Vec::with_capacity(up.len() * plane);
                for &u in up {
                    g.extend(core::iter::repeat_n(u / plane as f64, plane));
                }
                send(*input, g);
            }
            Op::Linear { input, weight, bias } => {
                let xs = val(*input);
                let ws = val(*weight);
                let (n, f) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
                let g = ws.len() / f;
                if wants(*input) {
                    let mut dx = vec![0.0; xs.len()];
                    for r in 0..n {
                        for k in 0..f {
                            let mut acc = 0.0;
                            for col in 0..g {
                                acc += up[r * g + col] * ws[k * g + col];
                            }
                            dx[r * f + k] = acc;
                        }
                    }
                    send(*input, dx);
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; ws.len()];
                    for r in 0..n {
                        for k in 0..f {
                            for col in 0..g {
                                dw[k * g + col] += xs[r * f + k] * up[r * g + col];
                            }
                        }
                    }
                    send(*weight, dw);
                }
                let mut db = vec![0.0; g];
                for r in 0..n {
                    for col in 0..g {
                        db[col] += up[r * g + col];
                    }
                }
                send(*bias, db);
            }
            Op::Concat(inputs) => {
                let [n, total, h, w] = nodes[i].value.dims4("concat_channels").expect("checked");
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = nodes[v.0].value.shape()[1];
                    if wants(v) {
                        let mut g = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            g.extend_from_slice(&up[start..start + c * plane]);
                        }
                        send(v, g);
                    }
                    offset += c;
                }
            }
            Op::Sigmoid(input) => {
                let g = nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&s, &u)| u * s * (1.0 - s))
                    .collect();
                send(*input, g);
            }
            Op::Bce { scores, labels } => {
                let n = labels.len() as f64;
                let g = val(*scores)
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            up[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                send(*scores, g);
            }
            Op::Add(a, b) => {
                send(*a, up.to_vec());
                send(*b, up.to_vec());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if wants(*a) {
                    send(*a, y.iter().zip(up).map(|(q, u)| q * u).collect());
                }
                if wants(*b) {
                    send(*b, x.iter().zip(up).map(|(p, u)| p * u).collect());
                }
            }
            Op::Sum(input) => send(*input, vec![up[0]; nodes[input.0].value.len()]),
            Op::Reshape(input) => send(*input, up.to_vec()),
        }
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
