//! Scoring datasets, with and without test-time augmentation.

use std::thread;

use densenet_core::arch::Model;
use densenet_core::data::{augment, sample_seed, AugmentSpec, Dataset};
use densenet_core::metrics::MetricsReport;
use densenet_core::Tensor;

use crate::error::{Error, Result};

/// Default number of views scored per image under test-time augmentation.
pub const DEFAULT_VIEWS: usize = 8;

const CHUNK: usize = 64;

/// Anything that maps an N×C×H×W batch to N scores in [0,1]. Scores must not
/// depend on which other images share the batch.
pub trait Scorer: Sync {
    fn score(&self, images: &Tensor) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn score(&self, images: &Tensor) -> Result<Vec<f64>> {
        Ok(self.predict(images)?)
    }
}

/// Scores of every sample, in dataset order. Chunks are scored on worker
/// threads.
pub fn score_dataset(scorer: &dyn Scorer, dataset: &Dataset) -> Result<Vec<f64>> {
    let chunks: Vec<_> = dataset.samples().chunks(CHUNK).collect();
    parallel_map(&chunks, |chunk| {
        let images: Vec<Tensor> = chunk.iter().map(|s| s.image.clone()).collect();
        scorer.score(&Tensor::stack(&images)?)
    })
    .map(|parts| parts.concat())
}

pub fn evaluate(scorer: &dyn Scorer, dataset: &Dataset) -> Result<MetricsReport> {
    let scores = score_dataset(scorer, dataset)?;
    Ok(MetricsReport::compute(&scores, &dataset.labels())?)
}

/// Mean score over the raw image and `n_views - 1` augmented views. View `v`
/// is drawn with seed `sample_seed(seed, v)`.
pub fn tta_predict(scorer: &dyn Scorer, image: &Tensor, spec: &AugmentSpec, n_views: usize, seed: u64) -> Result<f64> {
    if n_views == 0 {
        return Err(Error::Config("at least one view is required".into()));
    }
    let mut views = vec![image.clone()];
    for v in 1..n_views {
        views.push(augment(image, spec, sample_seed(seed, v))?);
    }
    let shape = image.shape().to_vec();
    let batch = Tensor::stack(&views)?;
    let scores = scorer.score(&batch)?;
    if scores.len() != n_views {
        return Err(Error::Config(format!("scorer returned {} scores for {n_views} views of {shape:?}", scores.len())));
    }
    // running mean: identical views give back their score exactly
    let mut mean = 0.0;
    for (k, s) in scores.iter().enumerate() {
        mean += (s - mean) / (k + 1) as f64;
    }
    Ok(mean)
}

/// TTA scores of every sample in dataset order; sample `i` uses seed
/// `sample_seed(seed, i)`.
pub fn tta_scores(scorer: &dyn Scorer, dataset: &Dataset, spec: &AugmentSpec, n_views: usize, seed: u64) -> Result<Vec<f64>> {
    let indexed: Vec<_> = dataset.samples().iter().enumerate().collect();
    let chunks: Vec<_> = indexed.chunks(CHUNK.div_ceil(n_views.max(1))).collect();
    parallel_map(&chunks, |chunk| {
        chunk
            .iter()
            .map(|(i, s)| tta_predict(scorer, &s.image, spec, n_views, sample_seed(seed, *i)))
            .collect::<Result<Vec<f64>>>()
    })
    .map(|parts| parts.concat())
}

pub fn evaluate_tta(
    scorer: &dyn Scorer,
    dataset: &Dataset,
    spec: &AugmentSpec,
    n_views: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let scores = tta_scores(scorer, dataset, spec, n_views, seed)?;
    Ok(MetricsReport::compute(&scores, &dataset.labels())?)
}

fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let f = &f;
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || items.iter().enumerate().skip(w).step_by(workers).map(|(i, x)| (i, f(x))).collect::<Vec<_>>()))
            .collect();
        let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
        for h in handles {
            for (i, r) in h.join().expect("scoring worker panicked") {
                slots[i] = Some(r);
            }
        }
        slots.into_iter().map(|r| r.expect("every chunk scored")).collect()
    })
}
