//! Built-in synthetic dataset: separable Gaussian-blob feature matrices.
//!
//! Every sample is a class-specific smooth bump on the time-frequency grid
//! plus seeded white noise, so every command and the whole search loop run
//! without any audio on disk. Samples are a pure function of
//! (seed, split, index); epochs only reshuffle the order.

use std::collections::HashMap;

use rand::Rng;

use crate::data::{Batch, BatchSource, Split};
use crate::rng::{self, seeded};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Feature grid matching the audio frontend output (101 frames x 40 coefficients).
pub const FEAT_H: usize = 101;
pub const FEAT_W: usize = 40;

#[derive(Clone, Copy, Debug)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 12,
            train: 192,
            val: 192,
            test: 96,
            feat_h: FEAT_H,
            feat_w: FEAT_W,
            noise: 0.5,
            seed: 0,
        }
    }
}

struct SplitCursor {
    order: Vec<usize>,
    next: usize,
}

pub struct SyntheticDataset<F: Scalar> {
    cfg: SyntheticConfig,
    /// One bump pattern per class.
    means: Vec<Vec<f64>>,
    cursors: HashMap<Split, SplitCursor>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> SyntheticDataset<F> {
    pub fn new(cfg: SyntheticConfig) -> Self {
        assert!(cfg.classes >= 2, "need at least two classes");
        let (h, w) = (cfg.feat_h, cfg.feat_w);
        let mut means = Vec::with_capacity(cfg.classes);
        for c in 0..cfg.classes {
            // bump centres scattered over the grid, one per class
            let tc = h as f64 * ((c as f64 + 0.5) / cfg.classes as f64);
            let fc = w as f64 * (((c * 7 + 3) % cfg.classes) as f64 + 0.5) / cfg.classes as f64;
            let (st, sf) = (h as f64 / 10.0, w as f64 / 8.0);
            let mut mean = vec![0.0f64; h * w];
            for t in 0..h {
                for f in 0..w {
                    let dt = (t as f64 - tc) / st;
                    let df = (f as f64 - fc) / sf;
                    mean[t * w + f] = 3.0 * (-(dt * dt + df * df) / 2.0).exp();
                }
            }
            means.push(mean);
        }
        SyntheticDataset { cfg, means, cursors: HashMap::new(), _marker: std::marker::PhantomData }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.cfg.train,
            Split::Val => self.cfg.val,
            Split::TrainVal => self.cfg.train + self.cfg.val,
            Split::Test => self.cfg.test,
        }
    }

    /// Deterministic sample: balanced labels, bump + seeded noise.
    fn sample(&self, split: Split, index: usize) -> (Vec<f64>, usize) {
        // the merged split reuses the underlying train/val samples
        if split == Split::TrainVal {
            return if index < self.cfg.train {
                self.sample(Split::Train, index)
            } else {
                self.sample(Split::Val, index - self.cfg.train)
            };
        }
        let label = index % self.cfg.classes;
        let tag = format!("sample.{split:?}.{index}");
        let mut r = seeded(self.cfg.seed, &tag);
        let mean = &self.means[label];
        let data = mean.iter().map(|&m| m + self.cfg.noise * rng::normal(&mut r)).collect();
        (data, label)
    }
}

impl<F: Scalar> BatchSource<F> for SyntheticDataset<F> {
    fn num_classes(&self) -> usize {
        self.cfg.classes
    }

    fn batches_per_epoch(&self, split: Split, batch_size: usize) -> usize {
        self.split_len(split) / batch_size
    }

    fn begin_epoch(&mut self, split: Split, epoch: u64) {
        let n = self.split_len(split);
        let mut order: Vec<usize> = (0..n).collect();
        if matches!(split, Split::Train | Split::Val | Split::TrainVal) {
            let mut r = seeded(self.cfg.seed, &format!("shuffle.{split:?}.{epoch}"));
            // Fisher-Yates
            for i in (1..n).rev() {
                let j = r.random_range(0..=i);
                order.swap(i, j);
            }
        }
        self.cursors.insert(split, SplitCursor { order, next: 0 });
    }

    fn next_batch(&mut self, split: Split, batch_size: usize) -> Option<Batch<F>> {
        let cursor = self.cursors.get_mut(&split)?;
        if cursor.next + batch_size > cursor.order.len() {
            return None;
        }
        let indices: Vec<usize> = cursor.order[cursor.next..cursor.next + batch_size].to_vec();
        cursor.next += batch_size;
        let (h, w) = (self.cfg.feat_h, self.cfg.feat_w);
        let mut data = Vec::with_capacity(batch_size * h * w);
        let mut labels = Vec::with_capacity(batch_size);
        for idx in indices {
            let (features, label) = self.sample(split, idx);
            data.extend(features.iter().map(|&v| F::from_f64(v)));
            labels.push(label);
        }
        let features = Tensor::new(vec![batch_size, 1, h, w], data).expect("consistent dims");
        Some(Batch { features, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_have_contract_shape() {
        let mut ds = SyntheticDataset::<f32>::new(SyntheticConfig::default());
        ds.begin_epoch(Split::Train, 0);
        let batch = ds.next_batch(Split::Train, 16).unwrap();
        assert_eq!(batch.features.shape(), &[16, 1, 101, 40]);
        assert_eq!(batch.labels.len(), 16);
        assert!(batch.labels.iter().all(|&l| l < 12));
    }

    #[test]
    fn epochs_are_reproducible_and_reshuffled() {
        let cfg = SyntheticConfig { train: 64, ..Default::default() };
        let mut ds = SyntheticDataset::<f32>::new(cfg);
        ds.begin_epoch(Split::Train, 3);
        let a = ds.next_batch(Split::Train, 8).unwrap();
        ds.begin_epoch(Split::Train, 3);
        let b = ds.next_batch(Split::Train, 8).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.labels, b.labels);

        ds.begin_epoch(Split::Train, 4);
        let c = ds.next_batch(Split::Train, 8).unwrap();
        assert_ne!(a.labels, c.labels); // different epoch, different order
    }

    #[test]
    fn trainval_unions_the_two_splits() {
        let cfg = SyntheticConfig { train: 32, val: 16, ..Default::default() };
        let ds = SyntheticDataset::<f32>::new(cfg);
        assert_eq!(ds.split_len(Split::TrainVal), 48);
        let (a, _) = ds.sample(Split::TrainVal, 35);
        let (b, _) = ds.sample(Split::Val, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn classes_are_separable_in_feature_space() {
        // mean distance between class centroids exceeds intra-class spread
        let cfg = SyntheticConfig { classes: 2, train: 40, noise: 0.5, ..Default::default() };
        let ds = SyntheticDataset::<f32>::new(cfg);
        let mut centroids = vec![vec![0.0f64; cfg.feat_h * cfg.feat_w]; 2];
        let mut counts = [0usize; 2];
        for i in 0..40 {
            let (x, l) = ds.sample(Split::Train, i);
            for (c, v) in centroids[l].iter_mut().zip(&x) {
                *c += v;
            }
            counts[l] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let dist: f64 = centroids[0]
            .iter()
            .zip(&centroids[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 5.0, "centroid distance {dist}");
    }
}
