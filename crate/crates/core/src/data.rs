//! Labeled image patches: dataset container, seeded train/held-out split,
//! augmentation, and mini-batch iteration.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One image patch. `image` is C×H×W with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: u8,
}

/// Ordered samples sharing one image shape, with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    source: Option<String>,
    counts: [usize; 2],
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, source: Option<String>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut counts = [0usize; 2];
        let shape = samples.first().map(|s| s.image.shape().to_vec());
        for (row, s) in samples.iter().enumerate() {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(alloc::format!("duplicate id `{}` at sample {row}", s.id)));
            }
            if s.label > 1 {
                return Err(Error::InvalidLabel {
                    index: row,
                    value: s.label as f64,
                });
            }
            if s.image.shape().len() != 3 || Some(s.image.shape()) != shape.as_deref() {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    lhs: shape.clone().unwrap_or_default(),
                    rhs: s.image.shape().to_vec(),
                });
            }
            if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(alloc::format!("sample `{}` has pixels outside [0, 1]", s.id)));
            }
            counts[s.label as usize] += 1;
        }
        Ok(Self { samples, source, counts })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    /// `[negatives, positives]`.
    pub fn class_counts(&self) -> [usize; 2] {
        self.counts
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    fn subset(&self, indices: &[usize]) -> Self {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let mut counts = [0; 2];
        for s in &samples {
            counts[s.label as usize] += 1;
        }
        Self {
            samples,
            source: self.source.clone(),
            counts,
        }
    }
}

/// Seeded shuffle, then the first `round(fraction · n)` samples train and
/// the rest are held out.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(Error::Empty { op: "split" });
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    let cut = libm::round(train_fraction * n as f64) as usize;
    let (train, held_out) = order.split_at(cut.min(n));
    Ok((dataset.subset(train), dataset.subset(held_out)))
}

/// Per-transform application probabilities. Transforms run in field order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub horizontal_flip: f64,
    pub vertical_flip: f64,
    /// Rotation by a uniformly drawn multiple of 90°. Non-square images only
    /// draw from {0°, 180°}.
    pub rotate90: f64,
    /// Bilinear rescale by a factor in `RESIZE_RANGE`, then center crop/pad.
    pub random_resize: f64,
    /// Zero-pad by `CROP_PAD` on every side, then crop a random window of
    /// the original size.
    pub random_crop: f64,
}

impl AugmentSpec {
    pub const RESIZE_RANGE: (f64, f64) = (0.9, 1.1);
    pub const CROP_PAD: usize = 4;

    pub fn identity() -> Self {
        Self {
            horizontal_flip: 0.0,
            vertical_flip: 0.0,
            rotate90: 0.0,
            random_resize: 0.0,
            random_crop: 0.0,
        }
    }

    /// Every transform with probability one half.
    pub fn standard() -> Self {
        Self {
            horizontal_flip: 0.5,
            vertical_flip: 0.5,
            rotate90: 0.5,
            random_resize: 0.5,
            random_crop: 0.5,
        }
    }

    /// Flips and right-angle rotations only: pixel permutations.
    pub fn dihedral() -> Self {
        Self {
            rotate90: 0.75,
            ..Self::flips()
        }
    }

    pub fn flips() -> Self {
        Self {
            horizontal_flip: 0.5,
            vertical_flip: 0.5,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [
            self.horizontal_flip,
            self.vertical_flip,
            self.rotate90,
            self.random_resize,
            self.random_crop,
        ];
        if ps.iter().all(|p| (0.0..=1.0).contains(p)) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(alloc::format!("augment probabilities outside [0, 1]: {self:?}")))
        }
    }
}

fn dims3(image: &Tensor) -> Result<[usize; 3]> {
    match image.shape() {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(Error::Rank {
            op: "augment",
            expected: 3,
            shape: other.to_vec(),
        }),
    }
}

/// Builds an image of the same shape from a per-pixel source lookup.
fn remap(image: &Tensor, out_hw: (usize, usize), src: impl Fn(usize, usize) -> Option<(usize, usize)>) -> Tensor {
    let [c, h, w] = dims3(image).expect("rank checked by caller");
    let (oh, ow) = out_hw;
    let data = image.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.push(src(y, x).map_or(0.0, |(sy, sx)| data[(ch * h + sy) * w + sx]));
            }
        }
    }
    Tensor::new([c, oh, ow], out).expect("sized above")
}

pub fn horizontal_flip(image: &Tensor) -> Result<Tensor> {
    let [_, h, w] = dims3(image)?;
    Ok(remap(image, (h, w), |y, x| Some((y, w - 1 - x))))
}

pub fn vertical_flip(image: &Tensor) -> Result<Tensor> {
    let [_, h, w] = dims3(image)?;
    Ok(remap(image, (h, w), |y, x| Some((h - 1 - y, x))))
}

/// Counter-clockwise rotation by `k` quarter turns; output pixel `(h, w)`
/// reads input `(w, H-1-h)` per quarter turn.
pub fn rotate90(image: &Tensor, k: u8) -> Result<Tensor> {
    let [_, h, w] = dims3(image)?;
    match k % 4 {
        0 => Ok(image.clone()),
        2 => Ok(remap(image, (h, w), |y, x| Some((h - 1 - y, w - 1 - x)))),
        q => {
            // A quarter turn swaps the extents.
            let once = remap(image, (w, h), |y, x| Some((x, w - 1 - y)));
            if q == 1 {
                Ok(once)
            } else {
                rotate90(&once, 2)
            }
        }
    }
}

/// Shifts the image by `(dy, dx)` inside a zero border of `pad` pixels:
/// the crop window's top-left corner sits at `(dy, dx)` of the padded image.
pub fn pad_crop(image: &Tensor, pad: usize, dy: usize, dx: usize) -> Result<Tensor> {
    let [_, h, w] = dims3(image)?;
    Ok(remap(image, (h, w), |y, x| {
        let sy = (y + dy).checked_sub(pad)?;
        let sx = (x + dx).checked_sub(pad)?;
        (sy < h && sx < w).then_some((sy, sx))
    }))
}

/// Bilinear rescale by `scale`, then center crop or zero-pad back to the
/// original size.
pub fn resize_jitter(image: &Tensor, scale: f64) -> Result<Tensor> {
    let [c, h, w] = dims3(image)?;
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::InvalidArgument(alloc::format!("resize scale {scale}")));
    }
    let new_h = (libm::round(scale * h as f64) as usize).max(1);
    let new_w = (libm::round(scale * w as f64) as usize).max(1);
    let sy_ratio = h as f64 / new_h as f64;
    let sx_ratio = w as f64 / new_w as f64;
    // Offset of the original frame inside the resized frame (may be negative).
    let off_y = (new_h as isize - h as isize).div_euclid(2);
    let off_x = (new_w as isize - w as isize).div_euclid(2);
    let data = image.data();
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let ry = y as isize + off_y;
            for x in 0..w {
                let rx = x as isize + off_x;
                if ry < 0 || rx < 0 || ry >= new_h as isize || rx >= new_w as isize {
                    out.push(0.0);
                    continue;
                }
                let fy = ((ry as f64 + 0.5) * sy_ratio - 0.5).clamp(0.0, (h - 1) as f64);
                let fx = ((rx as f64 + 0.5) * sx_ratio - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (fy as usize, fx as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Applies each enabled transform with its probability, drawing every
/// choice from a generator seeded by `seed`. Output shape equals input
/// shape.
pub fn augment(image: &Tensor, spec: &AugmentSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let [_, h, w] = dims3(image)?;
    let mut rng = rng::rng(seed);
    let fires = |p: f64, rng: &mut rand_chacha::ChaCha8Rng| p > 0.0 && rng.gen::<f64>() < p;
    let mut out = image.clone();
    if fires(spec.horizontal_flip, &mut rng) {
        out = horizontal_flip(&out)?;
    }
    if fires(spec.vertical_flip, &mut rng) {
        out = vertical_flip(&out)?;
    }
    if fires(spec.rotate90, &mut rng) {
        let k = if h == w { rng.gen_range(0..4u8) } else { 2 * rng.gen_range(0..2u8) };
        out = rotate90(&out, k)?;
    }
    if fires(spec.random_resize, &mut rng) {
        let (lo, hi) = AugmentSpec::RESIZE_RANGE;
        out = resize_jitter(&out, rng.gen_range(lo..=hi))?;
    }
    if fires(spec.random_crop, &mut rng) {
        let pad = AugmentSpec::CROP_PAD;
        let dy = rng.gen_range(0..=2 * pad);
        let dx = rng.gen_range(0..=2 * pad);
        out = pad_crop(&out, pad, dy, dx)?;
    }
    Ok(out)
}

/// Default mini-batch size.
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// One mini-batch: B×C×H×W images, B labels, and the dataset positions
/// they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Seed for the augmentation of the sample at dataset position `index`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    rng::derive(rng::derive(seed, 1), index as u64)
}

/// Deterministic mini-batch sequence over one epoch. The final partial batch
/// is kept.
#[derive(Clone, Debug)]
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    seed: u64,
    augment: Option<AugmentSpec>,
}

pub fn batches<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    augment: Option<AugmentSpec>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if let Some(a) = &augment {
        a.validate()?;
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(&mut rng::rng(rng::derive(seed, 0)));
    }
    Ok(Batches {
        dataset,
        order,
        batch_size,
        cursor: 0,
        seed,
        augment,
    })
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Positions the iterator at batch `batch` without materializing the
    /// skipped ones.
    pub fn seek(&mut self, batch: usize) {
        self.cursor = (batch * self.batch_size).min(self.order.len());
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let samples = self.dataset.samples();
        let images: Vec<Tensor> = indices
            .iter()
            .map(|&i| match &self.augment {
                Some(spec) => augment(&samples[i].image, spec, sample_seed(self.seed, i)).expect("validated spec"),
                None => samples[i].image.clone(),
            })
            .collect();
        let labels = indices.iter().map(|&i| samples[i].label as f64).collect();
        Some(Batch {
            images: Tensor::stack(&images).expect("dataset images share one shape"),
            labels,
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}
