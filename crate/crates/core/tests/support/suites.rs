//! Checks shared between the core integration tests and the acceptance
//! target. Each returns a summary instead of panicking so callers can
//! report per-criterion results.
#![allow(dead_code)]

use densenet_core::arch::{self, DenseBlockSpec, DenseLayerParams, BnVars, Model, ModelSpec};
use densenet_core::{ConvParams, Mode, PoolKind, RunningStats, Tape, Tensor, Var};
use rand::Rng;

use super::oracles::{self, check_gradients, close, project, random_tensor, GradCheck};

pub const FD_STEP: f64 = 1e-5;
pub const OP_RTOL: f64 = 1e-4;
pub const E2E_RTOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-7;

/// Finite-difference check of every differentiable tape operation for one
/// random seed.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, GradCheck)> {
    let mut r = oracles::rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, f: &mut dyn FnMut(&mut Tape, &[Var]) -> Var| {
        out.push((name, check_gradients(&inputs, None, FD_STEP, OP_RTOL, ABS_FLOOR, f)));
    };

    // conv2d with bias and random geometry; half the strided cases leave a
    // remainder row/column and use floor mode
    let (n, c, oc) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
    let stride = r.gen_range(1..3);
    let (kh, kw) = (r.gen_range(1..4), r.gen_range(1..4));
    let (ph, pw) = (r.gen_range(0..=(kh - 1) / 2), r.gen_range(0..=(kw - 1) / 2));
    let floor = stride > 1 && r.gen_bool(0.5);
    let h = r.gen_range(0..3) * stride + kh - 2 * ph + floor as usize;
    let w = r.gen_range(0..3) * stride + kw - 2 * pw + floor as usize;
    let conv_inputs = vec![
        random_tensor(&mut r, &[n, c, h, w], -1.0, 1.0),
        random_tensor(&mut r, &[oc, c, kh, kw], -1.0, 1.0),
        random_tensor(&mut r, &[oc], -1.0, 1.0),
    ];
    run("conv2d", conv_inputs, &mut |t, v| {
        let mut p = ConvParams::new(v[1]).with_bias(v[2]).with_stride(stride).with_floor_output(floor);
        p.padding = (ph, pw);
        let y = t.conv2d(v[0], p).unwrap();
        project(t, y, seed)
    });

    // batch norm, both modes
    let (n, c, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(2..4), r.gen_range(1..4));
    let bn_inputs = vec![
        random_tensor(&mut r, &[n, c, h, w], -2.0, 2.0),
        random_tensor(&mut r, &[c], 0.5, 1.5),
        random_tensor(&mut r, &[c], -0.5, 0.5),
    ];
    run("batch_norm2d/train", bn_inputs.clone(), &mut |t, v| {
        let mut stats = RunningStats::new(c);
        let y = t.batch_norm2d(v[0], v[1], v[2], &mut stats, Mode::Train).unwrap();
        project(t, y, seed)
    });
    let mut stats = RunningStats::new(c);
    stats.mean = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
    stats.var = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
    run("batch_norm2d/inference", bn_inputs, &mut |t, v| {
        let mut s = stats.clone();
        let y = t.batch_norm2d(v[0], v[1], v[2], &mut s, Mode::Inference).unwrap();
        project(t, y, seed)
    });

    run("relu", vec![away_from_zero(&mut r, &[2, 3, 3, 3])], &mut |t, v| {
        let y = t.relu(v[0]);
        project(t, y, seed)
    });

    for (name, kind) in [("pool2d/max", PoolKind::Max), ("pool2d/average", PoolKind::Average)] {
        let win = r.gen_range(1..4);
        let st = r.gen_range(1..3);
        let pad = r.gen_range(0..win);
        let x = distinct(&mut r, &[2, 2, 5, 5]);
        run(name, vec![x], &mut |t, v| {
            let y = t.pool2d(v[0], kind, (win, win), (st, st), (pad, pad)).unwrap();
            project(t, y, seed)
        });
    }

    run("global_avg_pool", vec![random_tensor(&mut r, &[2, 3, 3, 2], -1.0, 1.0)], &mut |t, v| {
        let y = t.global_avg_pool(v[0]).unwrap();
        project(t, y, seed)
    });

    let (n, f, g) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..4));
    let lin = vec![
        random_tensor(&mut r, &[n, f], -1.0, 1.0),
        random_tensor(&mut r, &[f, g], -1.0, 1.0),
        random_tensor(&mut r, &[g], -1.0, 1.0),
    ];
    run("linear", lin, &mut |t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        project(t, y, seed)
    });

    let cat = vec![
        random_tensor(&mut r, &[2, 1, 2, 3], -1.0, 1.0),
        random_tensor(&mut r, &[2, 3, 2, 3], -1.0, 1.0),
        random_tensor(&mut r, &[2, 2, 2, 3], -1.0, 1.0),
    ];
    run("concat_channels", cat, &mut |t, v| {
        let y = t.concat_channels(v).unwrap();
        project(t, y, seed)
    });

    run("sigmoid", vec![random_tensor(&mut r, &[7], -6.0, 6.0)], &mut |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, seed)
    });

    let labels: Vec<f64> = (0..6).map(|_| r.gen_range(0..2) as f64).collect();
    run("bce_loss", vec![random_tensor(&mut r, &[6], 0.05, 0.95)], &mut |t, v| t.bce_loss(v[0], &labels).unwrap());

    run(
        "add",
        vec![random_tensor(&mut r, &[3, 2], -1.0, 1.0), random_tensor(&mut r, &[3, 2], -1.0, 1.0)],
        &mut |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, seed)
        },
    );
    run(
        "mul",
        vec![random_tensor(&mut r, &[3, 2], -1.0, 1.0), random_tensor(&mut r, &[3, 2], -1.0, 1.0)],
        &mut |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, seed)
        },
    );

    // one tensor feeding two consumers
    run("shared_subgraph", vec![random_tensor(&mut r, &[2, 2, 3, 3], -1.0, 1.0)], &mut |t, v| {
        let a = t.sigmoid(v[0]);
        let b = t.mul(v[0], a).unwrap();
        let s = t.add(a, b).unwrap();
        project(t, s, seed)
    });

    let c = r.gen_range(1..3);
    let res = vec![
        random_tensor(&mut r, &[2, c, 3, 3], -1.0, 1.0),
        random_tensor(&mut r, &[c], 0.5, 1.5),
        random_tensor(&mut r, &[c], -0.5, 0.5),
        random_tensor(&mut r, &[c, c, 3, 3], -0.5, 0.5),
    ];
    run("residual_block", res, &mut |t, v| {
        let mut stats = RunningStats::new(c);
        let p = DenseLayerParams {
            bn: BnVars { gamma: v[1], beta: v[2] },
            conv: v[3],
        };
        let y = arch::residual_block_forward(t, v[0], &p, &mut stats, Mode::Train).unwrap();
        project(t, y, seed)
    });

    out
}

fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) { m } else { -m }
    })
}

/// Values spaced far enough apart that no window has a near-tie.
fn distinct(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    for i in (1..len).rev() {
        let j = r.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Summary of the exhaustive convolution sweep.
#[derive(Debug, Default)]
pub struct ConvSweep {
    pub cases: usize,
    pub mismatches: Vec<String>,
}

/// Every geometry with spatial extents, kernel extents ≤ 5, strides 1–2,
/// paddings 0–2, batch/channels 1–2, compared value by value with the
/// quadruple-loop oracle. Integer-valued data keeps every sum exact, so the
/// comparison is bit-exact irrespective of summation order.
pub fn conv_exhaustive_sweep() -> ConvSweep {
    let mut sweep = ConvSweep::default();
    let mut r = oracles::rng(42);
    for h in 1..=5 {
        for w in 1..=5 {
            for kh in 1..=5 {
                for kw in 1..=5 {
                    for sh in 1..=2 {
                        for sw in 1..=2 {
                            for ph in 0..=2 {
                                for pw in 0..=2 {
                                    if h + 2 * ph < kh || w + 2 * pw < kw {
                                        continue;
                                    }
                                    if (h + 2 * ph - kh) % sh != 0 || (w + 2 * pw - kw) % sw != 0 {
                                        continue;
                                    }
                                    let n = r.gen_range(1..=2);
                                    let c = r.gen_range(1..=2);
                                    let oc = r.gen_range(1..=2);
                                    conv_case(&mut r, &mut sweep, [n, c, h, w], [oc, c, kh, kw], (sh, sw), (ph, pw));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    sweep
}

fn int_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-4..=4) as f64)
}

fn conv_case(
    r: &mut impl Rng,
    sweep: &mut ConvSweep,
    xs: [usize; 4],
    ks: [usize; 4],
    stride: (usize, usize),
    padding: (usize, usize),
) {
    sweep.cases += 1;
    let x = int_tensor(r, &xs);
    let k = int_tensor(r, &ks);
    let b = int_tensor(r, &[ks[0]]);
    let (expect, oshape) = oracles::naive_conv2d(x.data(), xs, k.data(), ks, Some(b.data()), stride, padding);
    let g = int_tensor(r, &oshape);
    let (gx, gk, gb) = oracles::naive_conv2d_grads(x.data(), xs, k.data(), ks, g.data(), stride, padding);

    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.param(x), tape.param(k), tape.param(b));
    let mut p = ConvParams::new(kv).with_bias(bv);
    p.stride = stride;
    p.padding = padding;
    let tag = format!("x={xs:?} k={ks:?} s={stride:?} p={padding:?}");
    let y = match tape.conv2d(xv, p) {
        Ok(y) => y,
        Err(e) => {
            sweep.mismatches.push(format!("{tag}: rejected: {e}"));
            return;
        }
    };
    if tape.shape(y) != oshape || tape.value(y).data() != &expect[..] {
        sweep.mismatches.push(format!("{tag}: forward differs"));
        return;
    }
    let gc = tape.constant(g);
    let prod = tape.mul(y, gc).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    for (name, v, want) in [("input", xv, gx), ("kernel", kv, gk), ("bias", bv, gb)] {
        if tape.grad(v).unwrap().data() != &want[..] {
            sweep.mismatches.push(format!("{tag}: {name} gradient differs"));
        }
    }
}

/// Builds a dense block with random weights on a fresh tape; returns the
/// tape, the input and the block output.
pub fn random_block(
    r: &mut impl Rng,
    spec: DenseBlockSpec,
    hw: (usize, usize),
    zero_layers: &[usize],
) -> (Tape, Var, Var) {
    let mut tape = Tape::new();
    let x0 = tape.param(random_tensor_any(r, &[2, spec.in_channels, hw.0, hw.1]));
    let mut layers = Vec::new();
    let mut stats = Vec::new();
    for l in 0..spec.num_layers {
        let cin = spec.in_channels + l * spec.growth_rate;
        let gamma = tape.param(Tensor::from_fn([cin], |_| r.gen_range(0.5..1.5)));
        let beta = tape.param(Tensor::from_fn([cin], |_| r.gen_range(-0.5..0.5)));
        let w = if zero_layers.contains(&(l + 1)) {
            Tensor::zeros([spec.growth_rate, cin, 3, 3])
        } else {
            random_tensor_any(r, &[spec.growth_rate, cin, 3, 3])
        };
        layers.push(DenseLayerParams {
            bn: BnVars { gamma, beta },
            conv: tape.param(w),
        });
        stats.push(RunningStats::new(cin));
    }
    let y = arch::dense_block_forward(&mut tape, x0, &layers, &mut stats, Mode::Train).unwrap();
    (tape, x0, y)
}

fn random_tensor_any(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

/// Channel arithmetic and pass-through for one random block spec: the
/// output has C0 + L·k channels, the first C0 equal the input, and zeroing
/// layer j's weights only affects channels at or after its own slot.
pub fn dense_structure_check(seed: u64) -> Result<(), String> {
    let mut r = oracles::rng(seed);
    let spec = DenseBlockSpec {
        num_layers: r.gen_range(1..5),
        growth_rate: r.gen_range(1..5),
        in_channels: r.gen_range(1..6),
    };
    let hw = (r.gen_range(1..5), r.gen_range(1..5));
    let (c0, k, l) = (spec.in_channels, spec.growth_rate, spec.num_layers);
    let state = r.gen::<u64>();

    let (tape, x0, y) = random_block(&mut oracles::rng(state), spec, hw, &[]);
    let out = tape.value(y);
    if out.shape()[1] != c0 + l * k || out.shape()[1] != spec.out_channels() {
        return Err(format!("{spec:?}: {} channels", out.shape()[1]));
    }
    if out.slice_channels(0, c0).unwrap() != *tape.value(x0) {
        return Err(format!("{spec:?}: input channels rewritten"));
    }

    // Zero layer j: channels before its slot must match the unmodified run.
    let j = r.gen_range(1..=l);
    let (tape_z, _, y_z) = random_block(&mut oracles::rng(state), spec, hw, &[j]);
    let lo = c0 + (j - 1) * k;
    let before = out.slice_channels(0, lo).unwrap();
    if tape_z.value(y_z).slice_channels(0, lo).unwrap() != before {
        return Err(format!("{spec:?}: zeroing layer {j} changed earlier channels"));
    }
    let own = tape_z.value(y_z).slice_channels(lo, lo + k).unwrap();
    if own.data().iter().any(|&v| v != 0.0) {
        return Err(format!("{spec:?}: zeroed layer {j} emitted non-zero features"));
    }

    // Zero j and every later layer: only [lo, end) becomes zero.
    let tail: Vec<usize> = (j..=l).collect();
    let (tape_t, _, y_t) = random_block(&mut oracles::rng(state), spec, hw, &tail);
    let vt = tape_t.value(y_t);
    if vt.slice_channels(0, lo).unwrap() != before {
        return Err(format!("{spec:?}: zeroing layers {j}.. changed earlier channels"));
    }
    if vt.slice_channels(lo, c0 + l * k).unwrap().data().iter().any(|&v| v != 0.0) {
        return Err(format!("{spec:?}: zeroed tail not zero"));
    }
    Ok(())
}

/// End-to-end gradient check of bce(model(x), y) on the tiny preset with
/// 8×8 inputs in training mode: every parameter coordinate when `full`,
/// otherwise a random sample of parameter and input coordinates.
pub fn tiny_end_to_end_gradcheck(seed: u64, full: bool) -> GradCheck {
    let mut r = oracles::rng(seed);
    let model = Model::build(ModelSpec::tiny(), seed).unwrap();
    let batch = Tensor::from_fn([3, 3, 8, 8], |_| r.gen_range(0.0..1.0));
    let labels = vec![1.0, 0.0, 1.0];

    let loss_of = |m: &Model, x: &Tensor| -> f64 {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let fwd = m.forward(&mut tape, input).unwrap();
        let loss = tape.bce_loss(fwd.scores, &labels).unwrap();
        tape.value(loss).item().unwrap()
    };

    let mut m = model.clone();
    let mut tape = Tape::new();
    let input = tape.param(batch.clone());
    let fwd = m.forward(&mut tape, input).unwrap();
    let loss = tape.bce_loss(fwd.scores, &labels).unwrap();
    tape.backward(loss).unwrap();

    let params: Vec<_> = model.params().iter().collect();
    let mut coords: Vec<(Option<usize>, usize)> = Vec::new();
    if full {
        for (i, p) in params.iter().enumerate() {
            coords.extend((0..p.value.len()).map(|j| (Some(i), j)));
        }
    } else {
        for _ in 0..40 {
            let i = r.gen_range(0..params.len());
            coords.push((Some(i), r.gen_range(0..params[i].value.len())));
        }
    }
    for _ in 0..10 {
        coords.push((None, r.gen_range(0..batch.len())));
    }

    let mut report = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        near_zero: 0,
        failures: Vec::new(),
    };
    for (which, j) in coords {
        let (analytic, numeric) = match which {
            Some(i) => {
                let a = tape.grad(fwd.bindings[i]).map_or(0.0, |g| g.data()[j]);
                let name = params[i].name.clone();
                let mut plus = model.clone();
                plus.params_mut().get_mut(&name).unwrap().value.data_mut()[j] += FD_STEP;
                let mut minus = model.clone();
                minus.params_mut().get_mut(&name).unwrap().value.data_mut()[j] -= FD_STEP;
                (a, (loss_of(&plus, &batch) - loss_of(&minus, &batch)) / (2.0 * FD_STEP))
            }
            None => {
                let a = tape.grad(input).unwrap().data()[j];
                let mut plus = batch.clone();
                plus.data_mut()[j] += FD_STEP;
                let mut minus = batch.clone();
                minus.data_mut()[j] -= FD_STEP;
                (a, (loss_of(&model, &plus) - loss_of(&model, &minus)) / (2.0 * FD_STEP))
            }
        };
        report.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if diff > E2E_RTOL * scale && diff <= ABS_FLOOR {
            report.near_zero += 1;
        } else if scale > 0.0 {
            report.worst_rel = report.worst_rel.max(diff / scale);
        }
        if !close(analytic, numeric, E2E_RTOL, ABS_FLOOR) {
            let name = which.map_or("input".to_string(), |i| params[i].name.clone());
            report.failures.push(format!("{name}[{j}]: analytic {analytic:e} vs numeric {numeric:e}"));
        }
    }
    report
}
