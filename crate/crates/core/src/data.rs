//! Batch-level data abstraction consumed by the search and training loops.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    /// Union of train and validation, used for final from-scratch training.
    TrainVal,
    Test,
}

/// One minibatch: features shaped [batch, 1, H, W] plus class indices.
pub struct Batch<F: Scalar> {
    pub features: Tensor<F>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A deterministic epoch-oriented batch source. `begin_epoch` fixes the
/// shuffle (and any augmentation stream) for the given epoch; repeated
/// iteration over the same epoch must yield identical batches.
pub trait BatchSource<F: Scalar> {
    fn num_classes(&self) -> usize;

    fn batches_per_epoch(&self, split: Split, batch_size: usize) -> usize;

    fn begin_epoch(&mut self, split: Split, epoch: u64);

    /// Next batch of the split begun via `begin_epoch`; `None` once the
    /// epoch is exhausted.
    fn next_batch(&mut self, split: Split, batch_size: usize) -> Option<Batch<F>>;
}
