//! Dense blocks, transitions, the residual baseline block, and whole-model
//! assembly.
//!
//! Parameter names are part of the checkpoint format and must stay stable.
//! Blocks, layers and transitions are numbered from 1:
//!
//! | name | shape |
//! |------|-------|
//! | `stem.conv.weight` | `C_stem × 3 × k × k` |
//! | `stem.bn.gamma`, `stem.bn.beta` | `C_stem` |
//! | `block{i}.layer{j}.bn.gamma`, `.bn.beta` | input channels of the layer |
//! | `block{i}.layer{j}.conv.weight` | `growth × C_in × 3 × 3` |
//! | `transition{i}.bn.gamma`, `.bn.beta` | `C` |
//! | `transition{i}.conv.weight` | `floor(θ·C) × C × 1 × 1` |
//! | `final.bn.gamma`, `final.bn.beta` | `C_out` |
//! | `head.linear.weight` | `C_out × 1` |
//! | `head.linear.bias` | `1` |
//!
//! Every batch-norm prefix `p` also owns running statistics, exported as
//! `p.running_mean` and `p.running_var`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::tape::{ConvParams, Mode, PoolKind, RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// Scale and shift of one batch-norm layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
}

/// BN → ReLU → 3×3 convolution (stride 1, padding 1).
#[derive(Clone, Copy, Debug)]
pub struct DenseLayerParams {
    pub bn: BnVars,
    pub conv: Var,
}

/// BN → ReLU → 1×1 convolution → 2×2 average pool, stride 2.
#[derive(Clone, Copy, Debug)]
pub struct TransitionParams {
    pub bn: BnVars,
    pub conv: Var,
}

fn channels(tape: &Tape, x: Var, op: &'static str) -> Result<usize> {
    match tape.shape(x) {
        &[_, c, _, _] => Ok(c),
        other => Err(Error::Rank {
            op,
            expected: 4,
            shape: other.to_vec(),
        }),
    }
}

fn bn_relu(tape: &mut Tape, x: Var, bn: BnVars, stats: &mut RunningStats, mode: Mode) -> Result<Var> {
    let y = tape.batch_norm2d(x, bn.gamma, bn.beta, stats, mode)?;
    Ok(tape.relu(y))
}

/// One composite function of a dense block; emits `growth` channels at the
/// input's spatial size.
pub fn dense_layer_forward(
    tape: &mut Tape,
    x: Var,
    p: &DenseLayerParams,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Var> {
    let c = channels(tape, x, "dense_layer")?;
    if tape.shape(p.bn.gamma) != [c] {
        return Err(Error::ShapeMismatch {
            op: "dense_layer",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(p.bn.gamma).to_vec(),
        });
    }
    let h = bn_relu(tape, x, p.bn, stats, mode)?;
    tape.conv2d(h, ConvParams::new(p.conv).with_padding(1))
}

/// Runs a dense block: layer `l` sees the concatenation of the block input
/// and every earlier layer's output, and the block returns the concatenation
/// of all of them. Earlier channels are carried through untouched.
pub fn dense_block_forward(
    tape: &mut Tape,
    x0: Var,
    layers: &[DenseLayerParams],
    stats: &mut [RunningStats],
    mode: Mode,
) -> Result<Var> {
    if stats.len() != layers.len() {
        return Err(Error::InvalidArgument(format!(
            "dense block has {} layers but {} running-stat slots",
            layers.len(),
            stats.len()
        )));
    }
    let Some(first) = layers.first() else {
        return Ok(x0);
    };
    let c0 = channels(tape, x0, "dense_block")?;
    let growth = tape.shape(first.conv)[0];
    for (l, layer) in layers.iter().enumerate() {
        let w = tape.shape(layer.conv);
        let expected_in = c0 + l * growth;
        if w.len() != 4 || w[0] != growth || w[1] != expected_in || w[2] != 3 || w[3] != 3 {
            return Err(Error::InvalidSpec {
                stage: format!("dense layer {}", l + 1),
                reason: format!(
                    "conv weight {w:?} should be [{growth}, {expected_in}, 3, 3] for C0={c0}, k={growth}"
                ),
            });
        }
    }
    let mut features = Vec::with_capacity(layers.len() + 1);
    features.push(x0);
    for (layer, st) in layers.iter().zip(stats.iter_mut()) {
        let input = if features.len() == 1 {
            x0
        } else {
            tape.concat_channels(&features)?
        };
        let out = dense_layer_forward(tape, input, layer, st, mode)?;
        features.push(out);
    }
    tape.concat_channels(&features)
}

pub fn transition_forward(
    tape: &mut Tape,
    x: Var,
    p: &TransitionParams,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Var> {
    if let &[_, _, h, w] = tape.shape(x) {
        if h < 2 || w < 2 {
            return Err(Error::SpatialUnderflow {
                stage: "transition".into(),
                height: h,
                width: w,
            });
        }
    }
    let h = bn_relu(tape, x, p.bn, stats, mode)?;
    let y = tape.conv2d(h, ConvParams::new(p.conv))?;
    tape.pool2d(y, PoolKind::Average, (2, 2), (2, 2), (0, 0))
}

/// `H(x) + x` with `H` the same BN → ReLU → 3×3 conv composite as a dense
/// layer; the identity shortcut requires `H` to preserve the channel count.
pub fn residual_block_forward(
    tape: &mut Tape,
    x: Var,
    p: &DenseLayerParams,
    stats: &mut RunningStats,
    mode: Mode,
) -> Result<Var> {
    let c = channels(tape, x, "residual_block")?;
    let out_c = tape.shape(p.conv)[0];
    if out_c != c {
        return Err(Error::ShapeMismatch {
            op: "residual_block",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(p.conv).to_vec(),
        });
    }
    let h = dense_layer_forward(tape, x, p, stats, mode)?;
    tape.add(h, x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Optional max pool after the stem: (window, stride, padding).
    pub max_pool: Option<(usize, usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub in_channels: usize,
}

impl DenseBlockSpec {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.num_layers * self.growth_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpec {
    /// Fraction of channels kept, in `(0, 1]`.
    pub compression: f64,
}

impl TransitionSpec {
    pub fn out_channels(&self, in_channels: usize) -> usize {
        libm::floor(self.compression * in_channels as f64) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    Dense(DenseBlockSpec),
    Transition(TransitionSpec),
}

/// Declarative model layout: stem, then dense blocks and transitions, then
/// BN → ReLU → global average pool → linear → sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<Stage>,
}

impl ModelSpec {
    /// Blocks (2, 2), growth 4, compression 0.5, 3×3 stride-1 stem; meant
    /// for 32×32 inputs.
    pub fn tiny() -> Self {
        Self::dense("tiny", &[2, 2], 4, 0.5, StemSpec {
            out_channels: 8,
            kernel: 3,
            stride: 1,
            padding: 1,
            max_pool: None,
        })
    }

    /// Blocks (6, 12, 48, 32), growth 32, compression 0.5, 7×7 stride-2 stem
    /// and 3×3 stride-2 max pool; meant for 96×96 inputs.
    pub fn densenet201_like() -> Self {
        Self::dense("densenet201-like", &[6, 12, 48, 32], 32, 0.5, StemSpec {
            out_channels: 64,
            kernel: 7,
            stride: 2,
            padding: 3,
            max_pool: Some((3, 2, 1)),
        })
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "densenet201-like" => Some(Self::densenet201_like()),
            _ => None,
        }
    }

    /// Chains dense blocks of the given sizes with transitions between them.
    pub fn dense(name: &str, block_sizes: &[usize], growth: usize, compression: f64, stem: StemSpec) -> Self {
        let mut stages = Vec::new();
        let mut c = stem.out_channels;
        for (i, &layers) in block_sizes.iter().enumerate() {
            let block = DenseBlockSpec {
                num_layers: layers,
                growth_rate: growth,
                in_channels: c,
            };
            c = block.out_channels();
            stages.push(Stage::Dense(block));
            if i + 1 < block_sizes.len() {
                let t = TransitionSpec { compression };
                c = t.out_channels(c);
                stages.push(Stage::Transition(t));
            }
        }
        Self {
            name: name.to_string(),
            in_channels: 3,
            stem,
            stages,
        }
    }

    /// Checks the channel chain and returns the channel count reaching the
    /// head. The error names the first inconsistent stage.
    pub fn validate(&self) -> Result<usize> {
        let bad = |stage: String, reason: String| Err(Error::InvalidSpec { stage, reason });
        let s = &self.stem;
        if self.in_channels == 0 || s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
            return bad("stem".into(), "channels, kernel and stride must be positive".into());
        }
        if let Some((w, st, p)) = s.max_pool {
            if w == 0 || st == 0 || p >= w {
                return bad("stem".into(), "invalid max pool".into());
            }
        }
        let mut c = s.out_channels;
        let (mut blocks, mut transitions) = (0, 0);
        for stage in &self.stages {
            match stage {
                Stage::Dense(b) => {
                    blocks += 1;
                    let name = format!("block{blocks}");
                    if b.num_layers == 0 || b.growth_rate == 0 {
                        return bad(name, "num_layers and growth_rate must be at least 1".into());
                    }
                    if b.in_channels != c {
                        return bad(name, format!("declares {} input channels, receives {c}", b.in_channels));
                    }
                    c = b.out_channels();
                }
                Stage::Transition(t) => {
                    transitions += 1;
                    let name = format!("transition{transitions}");
                    if !(t.compression > 0.0 && t.compression <= 1.0) {
                        return bad(name, format!("compression {} outside (0, 1]", t.compression));
                    }
                    c = t.out_channels(c);
                    if c == 0 {
                        return bad(name, "compresses to zero channels".into());
                    }
                }
            }
        }
        if blocks == 0 {
            return bad("blocks".into(), "at least one dense block is required".into());
        }
        Ok(c)
    }
}

/// He-uniform initialization: U(-√(6/fan_in), √(6/fan_in)).
fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

/// An instantiated [`ModelSpec`]: trainable parameters plus batch-norm
/// running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    buffers: Vec<(String, RunningStats)>,
    mode: Mode,
}

/// Result of [`Model::forward`]: the score node and the tape variables
/// bound to each parameter, in [`ParamStore`] order.
#[derive(Clone, Debug)]
pub struct Forward {
    pub scores: Var,
    pub bindings: Vec<Var>,
}

impl Model {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let head_channels = spec.validate()?;
        let mut rng = rng::rng(seed);
        let mut params = ParamStore::new();
        let mut buffers = Vec::new();
        let mut add_bn = |params: &mut ParamStore, prefix: &str, c: usize| -> Result<()> {
            params.insert(format!("{prefix}.gamma"), Tensor::full([c], 1.0))?;
            params.insert(format!("{prefix}.beta"), Tensor::zeros([c]))?;
            buffers.push((prefix.to_string(), RunningStats::new(c)));
            Ok(())
        };

        let s = &spec.stem;
        let k = s.kernel;
        params.insert(
            "stem.conv.weight",
            he_uniform(&mut rng, &[s.out_channels, spec.in_channels, k, k], spec.in_channels * k * k),
        )?;
        add_bn(&mut params, "stem.bn", s.out_channels)?;
        let mut c = s.out_channels;
        let (mut bi, mut ti) = (0, 0);
        for stage in &spec.stages {
            match stage {
                Stage::Dense(b) => {
                    bi += 1;
                    for j in 1..=b.num_layers {
                        let prefix = format!("block{bi}.layer{j}");
                        add_bn(&mut params, &format!("{prefix}.bn"), c)?;
                        params.insert(
                            format!("{prefix}.conv.weight"),
                            he_uniform(&mut rng, &[b.growth_rate, c, 3, 3], c * 9),
                        )?;
                        c += b.growth_rate;
                    }
                }
                Stage::Transition(t) => {
                    ti += 1;
                    let out = t.out_channels(c);
                    add_bn(&mut params, &format!("transition{ti}.bn"), c)?;
                    params.insert(format!("transition{ti}.conv.weight"), he_uniform(&mut rng, &[out, c, 1, 1], c))?;
                    c = out;
                }
            }
        }
        debug_assert_eq!(c, head_channels);
        add_bn(&mut params, "final.bn", c)?;
        params.insert("head.linear.weight", he_uniform(&mut rng, &[c, 1], c))?;
        params.insert("head.linear.bias", Tensor::zeros([1]))?;
        Ok(Self {
            spec,
            params,
            buffers,
            mode: Mode::Train,
        })
    }

    /// Reassembles a model from stored parts. Parameter names and shapes and
    /// the running-statistics layout must match what [`Model::build`]
    /// produces for `spec`.
    pub fn from_parts(spec: ModelSpec, params: ParamStore, buffers: Vec<(String, RunningStats)>) -> Result<Self> {
        let reference = Self::build(spec, 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (want, got) in reference.params.iter().zip(params.iter()) {
            if want.name != got.name {
                return Err(Error::UnknownParameter { name: got.name.clone() });
            }
            if want.value.shape() != got.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "from_parts",
                    lhs: want.value.shape().to_vec(),
                    rhs: got.value.shape().to_vec(),
                });
            }
        }
        if buffers.len() != reference.buffers.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} running-statistics buffers, found {}",
                reference.buffers.len(),
                buffers.len()
            )));
        }
        for ((want, w), (got, g)) in reference.buffers.iter().zip(&buffers) {
            if want != got {
                return Err(Error::UnknownParameter { name: got.clone() });
            }
            if w.mean.len() != g.mean.len() || g.var.len() != g.mean.len() {
                return Err(Error::LengthMismatch {
                    left: w.mean.len(),
                    right: g.mean.len().max(g.var.len()),
                });
            }
        }
        Ok(Self {
            spec: reference.spec,
            params,
            buffers,
            mode: Mode::Train,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Batch-norm running statistics keyed by layer prefix, in build order.
    pub fn buffers(&self) -> &[(String, RunningStats)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.buffers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Records the full network on `tape` for an N×C×H×W `input`.
    /// Parameters become gradient-carrying leaves; in training mode the
    /// batch-norm running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape, input: Var) -> Result<Forward> {
        let bindings: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let mode = self.mode;
        let mut buffers = core::mem::take(&mut self.buffers);
        let scores = run_network(&self.spec, &self.params, &bindings, &mut buffers, tape, input, mode);
        self.buffers = buffers;
        Ok(Forward {
            scores: scores?,
            bindings,
        })
    }

    /// Adds the tape gradients of every bound parameter into the parameter
    /// gradient slots.
    pub fn collect_grads(&mut self, tape: &Tape, forward: &Forward) -> Result<()> {
        for (i, &v) in forward.bindings.iter().enumerate() {
            if let Some(g) = tape.grad(v) {
                let name = self.params.iter().nth(i).map(|p| p.name.clone()).expect("binding per param");
                self.params.accumulate_grad(&name, g)?;
            }
        }
        Ok(())
    }

    /// Inference-mode scores for an N×C×H×W batch without touching the model.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let bindings: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let mut buffers = self.buffers.clone();
        let scores = run_network(&self.spec, &self.params, &bindings, &mut buffers, &mut tape, input, Mode::Inference)?;
        Ok(tape.value(scores).data().to_vec())
    }
}

fn run_network(
    spec: &ModelSpec,
    params: &ParamStore,
    bindings: &[Var],
    buffers: &mut [(String, RunningStats)],
    tape: &mut Tape,
    input: Var,
    mode: Mode,
) -> Result<Var> {
    let var = |name: &str| -> Result<Var> {
        params.position(name).map(|i| bindings[i]).ok_or_else(|| Error::UnknownParameter {
            name: name.to_string(),
        })
    };
    let bn = |prefix: &str| -> Result<BnVars> {
        Ok(BnVars {
            gamma: var(&format!("{prefix}.gamma"))?,
            beta: var(&format!("{prefix}.beta"))?,
        })
    };
    let slot = |buffers: &[(String, RunningStats)], prefix: &str| -> Result<usize> {
        buffers.iter().position(|(n, _)| n == prefix).ok_or_else(|| Error::UnknownParameter {
            name: format!("{prefix}.running_mean"),
        })
    };
    let underflow = |stage: &str, x: Var, tape: &Tape| {
        let s = tape.shape(x);
        Error::SpatialUnderflow {
            stage: stage.to_string(),
            height: s[2],
            width: s[3],
        }
    };
    let at_stage = |stage: &str, x: Var, tape: &Tape, e: Error| match e {
        Error::WindowTooLarge { .. } | Error::NonIntegralExtent { .. } | Error::SpatialUnderflow { .. } => {
            underflow(stage, x, tape)
        }
        other => other,
    };

    match tape.shape(input) {
        &[_, c, _, _] if c == spec.in_channels => {}
        other => {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: other.to_vec(),
                rhs: alloc::vec![0, spec.in_channels, 0, 0],
            })
        }
    }

    let s = &spec.stem;
    let conv = ConvParams::new(var("stem.conv.weight")?)
        .with_stride(s.stride)
        .with_padding(s.padding)
        .with_floor_output(true);
    let mut x = tape.conv2d(input, conv).map_err(|e| at_stage("stem", input, tape, e))?;
    let i = slot(buffers, "stem.bn")?;
    x = bn_relu(tape, x, bn("stem.bn")?, &mut buffers[i].1, mode)?;
    if let Some((w, st, p)) = s.max_pool {
        let before = x;
        x = tape
            .pool2d(x, PoolKind::Max, (w, w), (st, st), (p, p))
            .map_err(|e| at_stage("stem pool", before, tape, e))?;
    }

    let (mut bi, mut ti) = (0, 0);
    for stage in &spec.stages {
        match stage {
            Stage::Dense(b) => {
                bi += 1;
                let mut layers = Vec::with_capacity(b.num_layers);
                let mut stats = Vec::with_capacity(b.num_layers);
                let mut slots = Vec::with_capacity(b.num_layers);
                for j in 1..=b.num_layers {
                    let prefix = format!("block{bi}.layer{j}");
                    layers.push(DenseLayerParams {
                        bn: bn(&format!("{prefix}.bn"))?,
                        conv: var(&format!("{prefix}.conv.weight"))?,
                    });
                    let k = slot(buffers, &format!("{prefix}.bn"))?;
                    stats.push(buffers[k].1.clone());
                    slots.push(k);
                }
                let before = x;
                x = dense_block_forward(tape, x, &layers, &mut stats, mode)
                    .map_err(|e| at_stage(&format!("block{bi}"), before, tape, e))?;
                for (k, st) in slots.into_iter().zip(stats) {
                    buffers[k].1 = st;
                }
            }
            Stage::Transition(_) => {
                ti += 1;
                let prefix = format!("transition{ti}");
                let p = TransitionParams {
                    bn: bn(&format!("{prefix}.bn"))?,
                    conv: var(&format!("{prefix}.conv.weight"))?,
                };
                let k = slot(buffers, &format!("{prefix}.bn"))?;
                let before = x;
                x = transition_forward(tape, x, &p, &mut buffers[k].1, mode)
                    .map_err(|e| at_stage(&prefix, before, tape, e))?;
            }
        }
    }

    let k = slot(buffers, "final.bn")?;
    x = bn_relu(tape, x, bn("final.bn")?, &mut buffers[k].1, mode)?;
    let pooled = tape.global_avg_pool(x)?;
    let logits = tape.linear(pooled, var("head.linear.weight")?, var("head.linear.bias")?)?;
    let n = tape.shape(logits)[0];
    let flat = tape.reshape(logits, &[n])?;
    Ok(tape.sigmoid(flat))
}
