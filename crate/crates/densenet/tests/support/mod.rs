#![allow(dead_code)]

use std::path::Path;

use densenet::eval::Scorer;
use densenet::io;
use densenet_core::data::{Dataset, Sample};
use densenet_core::{rng, Tensor};
use rand::Rng;

/// Alternating labels; negatives sit around 0.25 and positives around 0.75
/// with uniform noise of at most 0.2, so mean intensity separates the classes.
pub fn separable(n: usize, hw: usize, seed: u64) -> Dataset {
    let mut r = rng::rng(seed);
    let samples = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let base = if label == 1 { 0.75 } else { 0.25 };
            Sample {
                id: format!("s{i:03}"),
                image: Tensor::from_fn([3, hw, hw], |_| base + r.gen_range(-0.2..0.2)),
                label,
            }
        })
        .collect();
    Dataset::new(samples, None).unwrap()
}

/// Writes `dataset` as PNGs plus `labels.csv` under `dir`; returns the
/// manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> std::path::PathBuf {
    for s in dataset.samples() {
        io::write_png(&dir.join(format!("{}.png", s.id)), &s.image).unwrap();
    }
    let manifest = dir.join("labels.csv");
    io::write_manifest(&manifest, dataset.samples().iter().map(|s| (s.id.as_str(), s.label))).unwrap();
    manifest
}

/// Scores an image by hashing its pixel bits into [0,1).
pub struct HashScorer;

pub fn hash_score(image: &[f64]) -> f64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in image {
        h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
    }
    (rng::mix64(h) >> 11) as f64 / (1u64 << 53) as f64
}

impl Scorer for HashScorer {
    fn score(&self, images: &Tensor) -> densenet::Result<Vec<f64>> {
        let n = images.shape()[0];
        let per = images.len() / n.max(1);
        Ok(images.data().chunks(per).map(hash_score).collect())
    }
}

/// Depends only on the multiset of pixel values, so any pixel permutation
/// leaves the score bit-identical.
pub struct SymmetricScorer;

impl Scorer for SymmetricScorer {
    fn score(&self, images: &Tensor) -> densenet::Result<Vec<f64>> {
        let n = images.shape()[0];
        let per = images.len() / n.max(1);
        Ok(images
            .data()
            .chunks(per)
            .map(|px| {
                let mut v = px.to_vec();
                v.sort_by(f64::total_cmp);
                let s: f64 = v.iter().sum::<f64>() / per as f64;
                densenet_core::tape::sigmoid(8.0 * (s - 0.5))
            })
            .collect())
    }
}

pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, images: &Tensor) -> densenet::Result<Vec<f64>> {
        Ok(vec![self.0; images.shape()[0]])
    }
}

/// Reads the label back out of images produced by [`separable`].
pub struct LabelOracle;

impl Scorer for LabelOracle {
    fn score(&self, images: &Tensor) -> densenet::Result<Vec<f64>> {
        let n = images.shape()[0];
        let per = images.len() / n.max(1);
        Ok(images
            .data()
            .chunks(per)
            .map(|px| if px.iter().sum::<f64>() / per as f64 > 0.5 { 1.0 } else { 0.0 })
            .collect())
    }
}
