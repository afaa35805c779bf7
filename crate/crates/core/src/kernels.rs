//! Slice-level convolution and pooling kernels (N×C×H×W, row-major).
//!
//! These are the loops behind [`crate::Tape`]'s convolution and pooling
//! nodes. Every kernel iterates in a fixed order so results are
//! reproducible bit for bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Output extent of a sliding window along one axis.
///
/// With `floor` unset the window must tile the padded extent exactly.
pub fn output_extent(
    op: &'static str,
    extent: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    floor: bool,
) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "{op}: kernel and stride must be positive"
        )));
    }
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::WindowTooLarge {
            op,
            window: (kernel, kernel),
            input: (padded, padded),
        });
    }
    let span = padded - kernel;
    if !floor && !span.is_multiple_of(stride) {
        return Err(Error::NonIntegralExtent {
            op,
            extent,
            kernel,
            stride,
            padding,
        });
    }
    Ok(span / stride + 1)
}

/// Range of output positions whose tap `k` lands inside `0..input`.
#[inline]
fn valid_range(output: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if input + pad <= k {
        return (0, 0);
    }
    let hi = ((input - 1 + pad - k) / stride + 1).min(output);
    (lo.min(hi), hi)
}

/// Shape bookkeeping for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 4],
        weight: [usize; 4],
        stride: (usize, usize),
        padding: (usize, usize),
        floor: bool,
    ) -> Result<Self> {
        let [n, c, h, w] = input;
        let [oc, ic, kh, kw] = weight;
        if ic != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        let out_h = output_extent("conv2d", h, kh, stride.0, padding.0, floor)?;
        let out_w = output_extent("conv2d", w, kw, stride.1, padding.1, floor)?;
        Ok(Self {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: oc,
            kernel: (kh, kw),
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Cross-correlation (no kernel flip) plus optional per-channel bias.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.out_channels * out_plane];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let dst = &mut out[(b * g.out_channels + o) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                dst.fill(bias[o]);
            }
            for ci in 0..g.in_channels {
                let src = &input[(b * g.in_channels + ci) * in_plane..][..in_plane];
                let taps = &weight[(o * g.in_channels + ci) * kh * kw..][..kh * kw];
                for ki in 0..kh {
                    let (y_lo, y_hi) = valid_range(g.out_h, g.in_h, ki, sh, ph);
                    for kj in 0..kw {
                        let wv = taps[ki * kw + kj];
                        let (x_lo, x_hi) = valid_range(g.out_w, g.in_w, kj, sw, pw);
                        if x_lo >= x_hi {
                            continue;
                        }
                        for y in y_lo..y_hi {
                            let row = &src[(y * sh + ki - ph) * g.in_w..][..g.in_w];
                            let out_row = &mut dst[y * g.out_w..][x_lo..x_hi];
                            axpy(out_row, &row[x_lo * sw + kj - pw..], sw, wv);
                        }
                    }
                }
            }
        }
    }
    out
}

/// dst[i] += a · src[i·stride]
#[inline(always)]
fn axpy(dst: &mut [f64], src: &[f64], stride: usize, a: f64) {
    if stride == 1 {
        let src = &src[..dst.len()];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d += a * v;
        }
    } else {
        for (d, &v) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *d += a * v;
        }
    }
}

/// dst[i·stride] += a · src[i]
#[inline(always)]
fn scatter(dst: &mut [f64], src: &[f64], stride: usize, a: f64) {
    if stride == 1 {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d += a * v;
        }
    } else {
        for (d, &v) in dst.iter_mut().step_by(stride).zip(src) {
            *d += a * v;
        }
    }
}

/// Σ a[i] · b[i·stride], four interleaved partial sums.
#[inline(always)]
fn dot(a: &[f64], b: &[f64], stride: usize) -> f64 {
    if stride != 1 {
        return a.iter().zip(b.iter().step_by(stride)).map(|(x, y)| x * y).sum();
    }
    let b = &b[..a.len()];
    let mut acc = [0.0; 4];
    let (ac, ar) = (a.chunks_exact(4), a.chunks_exact(4).remainder());
    for (x, y) in ac.zip(b.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ar.iter().zip(&b[a.len() - ar.len()..]).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradients of a convolution given the upstream gradient `grad_out`.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
) -> ConvGrads {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut grad_input = want_input.then(|| vec![0.0; input.len()]);
    let mut grad_weight = want_weight.then(|| vec![0.0; weight.len()]);
    let mut grad_bias = vec![0.0; g.out_channels];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let gout = &grad_out[(b * g.out_channels + o) * out_plane..][..out_plane];
            grad_bias[o] += gout.iter().sum::<f64>();
            for ci in 0..g.in_channels {
                let src_off = (b * g.in_channels + ci) * in_plane;
                let w_off = (o * g.in_channels + ci) * kh * kw;
                for ki in 0..kh {
                    let (y_lo, y_hi) = valid_range(g.out_h, g.in_h, ki, sh, ph);
                    for kj in 0..kw {
                        let (x_lo, x_hi) = valid_range(g.out_w, g.in_w, kj, sw, pw);
                        let wv = weight[w_off + ki * kw + kj];
                        if x_lo >= x_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in y_lo..y_hi {
                            let start = src_off + (y * sh + ki - ph) * g.in_w + x_lo * sw + kj - pw;
                            let end = start + (x_hi - x_lo - 1) * sw + 1;
                            let grow = &gout[y * g.out_w..][x_lo..x_hi];
                            if let Some(gi) = grad_input.as_mut() {
                                scatter(&mut gi[start..end], grow, sw, wv);
                            }
                            if want_weight {
                                acc += dot(grow, &input[start..end], sw);
                            }
                        }
                        if let Some(gw) = grad_weight.as_mut() {
                            gw[w_off + ki * kw + kj] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Mean over the full window; padded taps count as zeros.
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(
        input: [usize; 4],
        window: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let [n, c, h, w] = input;
        if padding.0 >= window.0 || padding.1 >= window.1 {
            return Err(Error::InvalidArgument(alloc::format!(
                "pool2d: padding {padding:?} must be smaller than window {window:?}"
            )));
        }
        let out = output_extent("pool2d", h, window.0, stride.0, padding.0, true)
            .and_then(|oh| Ok((oh, output_extent("pool2d", w, window.1, stride.1, padding.1, true)?)));
        let (out_h, out_w) = out.map_err(|e| match e {
            Error::WindowTooLarge { .. } => Error::WindowTooLarge {
                op: "pool2d",
                window,
                input: (h + 2 * padding.0, w + 2 * padding.1),
            },
            other => other,
        })?;
        Ok(Self {
            planes: n * c,
            in_h: h,
            in_w: w,
            window,
            stride,
            padding,
            out_h,
            out_w,
        })
    }
}

/// Pools every plane. For max pooling also returns the flat input index
/// chosen by each output (first maximum in row-major window order).
pub fn pool2d_forward(g: &PoolGeometry, kind: PoolKind, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = Vec::with_capacity(g.planes * out_plane);
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax.reserve(g.planes * out_plane);
    }
    let area = (g.window.0 * g.window.1) as f64;
    for p in 0..g.planes {
        let base = p * in_plane;
        for y in 0..g.out_h {
            for x in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                let mut sum = 0.0;
                for_each_tap(g, y, x, |idx| {
                    let v = input[base + idx];
                    if best_at == usize::MAX || v > best {
                        best = v;
                        best_at = base + idx;
                    }
                    sum += v;
                });
                match kind {
                    PoolKind::Max => {
                        out.push(best);
                        argmax.push(best_at);
                    }
                    PoolKind::Average => out.push(sum / area),
                }
            }
        }
    }
    (out, argmax)
}

pub fn pool2d_backward(
    g: &PoolGeometry,
    kind: PoolKind,
    argmax: &[usize],
    grad_out: &[f64],
) -> Vec<f64> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut grad_in = vec![0.0; g.planes * in_plane];
    match kind {
        PoolKind::Max => {
            for (&at, &go) in argmax.iter().zip(grad_out) {
                grad_in[at] += go;
            }
        }
        PoolKind::Average => {
            let area = (g.window.0 * g.window.1) as f64;
            for p in 0..g.planes {
                let base = p * in_plane;
                for y in 0..g.out_h {
                    for x in 0..g.out_w {
                        let share = grad_out[p * out_plane + y * g.out_w + x] / area;
                        for_each_tap(g, y, x, |idx| grad_in[base + idx] += share);
                    }
                }
            }
        }
    }
    grad_in
}

/// Visits in-bounds taps of output `(y, x)` in row-major window order.
#[inline]
fn for_each_tap(g: &PoolGeometry, y: usize, x: usize, mut f: impl FnMut(usize)) {
    let y0 = (y * g.stride.0) as isize - g.padding.0 as isize;
    let x0 = (x * g.stride.1) as isize - g.padding.1 as isize;
    for dy in 0..g.window.0 as isize {
        let iy = y0 + dy;
        if iy < 0 || iy >= g.in_h as isize {
            continue;
        }
        for dx in 0..g.window.1 as isize {
            let ix = x0 + dx;
            if ix < 0 || ix >= g.in_w as isize {
                continue;
            }
            f(iy as usize * g.in_w + ix as usize);
        }
    }
}
