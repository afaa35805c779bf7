//! Reference implementations used only by tests. Each is written directly
//! from the mathematical definition and shares no code with the crate.
#![allow(dead_code)]

use densenet_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Quadruple-loop cross-correlation. Returns output and its N×OC×OH×OW shape.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [oc, _, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (y * sh + ki) as isize - ph as isize;
                                let ix = (xo * sw + kj) as isize - pw as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                };
                                acc += k[((o * c + ci) * kh + ki) * kw + kj] * v;
                            }
                        }
                    }
                    out[((b * oc + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, oc, oh, ow])
}

/// Gradients of `sum(conv(x, k) ⊙ g)` with respect to x, k and the bias,
/// each entry computed as its own explicit sum.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d_grads(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [oc, _, kh, kw]: [usize; 4],
    g: &[f64],
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let gidx = |b: usize, o: usize, y: usize, xo: usize| ((b * oc + o) * oh + y) * ow + xo;
    let mut gx = vec![0.0; x.len()];
    for b in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = 0.0;
                    for o in 0..oc {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ny = iy + ph;
                                let nx = ix + pw;
                                if ny < ki || nx < kj || (ny - ki) % sh != 0 || (nx - kj) % sw != 0 {
                                    continue;
                                }
                                let (y, xo) = ((ny - ki) / sh, (nx - kj) / sw);
                                if y < oh && xo < ow {
                                    acc += k[((o * c + ci) * kh + ki) * kw + kj] * g[gidx(b, o, y, xo)];
                                }
                            }
                        }
                    }
                    gx[((b * c + ci) * h + iy) * w + ix] = acc;
                }
            }
        }
    }
    let mut gk = vec![0.0; k.len()];
    for o in 0..oc {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut acc = 0.0;
                    for b in 0..n {
                        for y in 0..oh {
                            for xo in 0..ow {
                                let iy = (y * sh + ki) as isize - ph as isize;
                                let ix = (xo * sw + kj) as isize - pw as isize;
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                    acc += x[((b * c + ci) * h + iy as usize) * w + ix as usize] * g[gidx(b, o, y, xo)];
                                }
                            }
                        }
                    }
                    gk[((o * c + ci) * kh + ki) * kw + kj] = acc;
                }
            }
        }
    }
    let mut gb = vec![0.0; oc];
    for b in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    gb[o] += g[gidx(b, o, y, xo)];
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Reduces any node to a scalar through a fixed random projection, so every
/// output element contributes a distinct weight to the loss.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let weights = random_tensor(&mut r, &shape, -1.0, 1.0);
    let c = tape.constant(weights);
    let prod = tape.mul(out, c).unwrap();
    tape.sum(prod)
}

/// Outcome of comparing analytic and central-difference partials.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Worst relative error among partials judged by the relative tolerance.
    pub worst_rel: f64,
    /// Partials outside the relative tolerance but within the absolute floor.
    pub near_zero: usize,
    pub failures: Vec<String>,
}

/// Within `rtol` relative error, or within `atol` absolute error near zero.
pub fn close(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= atol || diff <= rtol * analytic.abs().max(numeric.abs())
}

/// Central finite-difference check of every partial of `f` with respect to
/// every input (or the `coords` subset, given as (input, flat index)).
pub fn check_gradients(
    inputs: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    h: f64,
    rtol: f64,
    atol: f64,
    f: &mut dyn FnMut(&mut Tape, &[Var]) -> Var,
) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut eval = |perturbed: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs);
        t.value(l).item().unwrap()
    };

    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let coords = coords.unwrap_or(&all);
    let mut report = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        near_zero: 0,
        failures: Vec::new(),
    };
    for &(i, j) in coords {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += h;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic[i].data()[j];
        report.checked += 1;
        let diff = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        if diff > rtol * scale && diff <= atol {
            report.near_zero += 1;
        } else if scale > 0.0 {
            report.worst_rel = report.worst_rel.max(diff / scale);
        }
        if !close(a, numeric, rtol, atol) {
            report.failures.push(format!("input {i}[{j}]: analytic {a:e} vs numeric {numeric:e}"));
        }
    }
    report
}

/// Textbook scalar Adam with bias correction.
#[derive(Clone, Debug)]
pub struct ScalarAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, p: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.t));
        p - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

/// Fraction of positive–negative pairs ranked correctly, ties counted ½.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// ROC points by recounting the confusion matrix at +inf and at every
/// distinct score, highest first.
pub fn brute_roc(scores: &[f64], labels: &[u8]) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    thresholds
        .iter()
        .map(|&t| {
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
            let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 0).count() as f64;
            (fp / neg, tp / pos)
        })
        .collect()
}

/// Quarter turn of a single-channel square image: out(h, w) = in(w, H-1-h).
pub fn rot90_oracle(img: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for h in 0..n {
        for w in 0..n {
            out[h * n + w] = img[w * n + (n - 1 - h)];
        }
    }
    out
}
