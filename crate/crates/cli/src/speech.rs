//! Adapters plugging the data backends into the search loop's batch trait.

use std::collections::HashMap;
use std::path::Path;

use cellsearch_audio::dataset::{DataSplit, SpeechPipeline, ALL_LABELS};
use cellsearch_audio::MfccConfig;
use cellsearch_core::data::{Batch, BatchSource, Split};
use cellsearch_core::rng::derive_seed;
use cellsearch_core::synthetic::SyntheticDataset;
use cellsearch_core::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::CliError;

fn to_data_split(split: Split) -> DataSplit {
    match split {
        Split::Train => DataSplit::Train,
        Split::Val => DataSplit::Val,
        Split::TrainVal => DataSplit::TrainVal,
        Split::Test => DataSplit::Test,
    }
}

/// Training passes (and only they) get augmentation and per-epoch silence
/// recropping.
fn is_training_split(split: Split) -> bool {
    matches!(split, Split::Train | Split::TrainVal)
}

struct EpochCursor {
    plan: Vec<usize>,
    next: usize,
    rng: Option<ChaCha8Rng>,
}

/// Speech Commands audio rendered on the fly.
pub struct SpeechSource {
    pipeline: SpeechPipeline,
    seed: u64,
    class_balance: bool,
    cursors: HashMap<Split, EpochCursor>,
}

impl SpeechSource {
    pub fn open(root: &Path, seed: u64, class_balance: bool) -> Result<Self, CliError> {
        let pipeline = SpeechPipeline::open(root, MfccConfig::default())
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(SpeechSource { pipeline, seed, class_balance, cursors: HashMap::new() })
    }

    pub fn pipeline(&self) -> &SpeechPipeline {
        &self.pipeline
    }

    pub fn class_names(&self) -> Vec<String> {
        ALL_LABELS.iter().map(|l| l.name().to_string()).collect()
    }
}

impl BatchSource<f32> for SpeechSource {
    fn num_classes(&self) -> usize {
        ALL_LABELS.len()
    }

    fn batches_per_epoch(&self, split: Split, batch_size: usize) -> usize {
        let seed = derive_seed(self.seed, &format!("data.{split:?}.0"));
        self.pipeline.index.epoch_plan(to_data_split(split), seed, self.class_balance).len()
            / batch_size
    }

    fn begin_epoch(&mut self, split: Split, epoch: u64) {
        let seed = derive_seed(self.seed, &format!("data.{split:?}.{epoch}"));
        let plan = self.pipeline.index.epoch_plan(to_data_split(split), seed, self.class_balance);
        let rng = is_training_split(split)
            .then(|| ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("augment.{split:?}.{epoch}"))));
        self.cursors.insert(split, EpochCursor { plan, next: 0, rng });
    }

    fn next_batch(&mut self, split: Split, batch_size: usize) -> Option<Batch<f32>> {
        let cursor = self.cursors.get_mut(&split)?;
        if cursor.next + batch_size > cursor.plan.len() {
            return None;
        }
        let indices = &cursor.plan[cursor.next..cursor.next + batch_size];
        cursor.next += batch_size;
        let rendered = self
            .pipeline
            .render_batch(indices, cursor.rng.as_mut())
            .unwrap_or_else(|e| panic!("failed to render batch: {e}"));
        let features = Tensor::new(
            vec![rendered.batch, 1, rendered.frames, rendered.coeffs],
            rendered.features,
        )
        .expect("consistent dims");
        Some(Batch { features, labels: rendered.labels })
    }
}

/// Either data backend behind one face.
pub enum DataSource {
    Synthetic(SyntheticDataset<f32>),
    Speech(SpeechSource),
}

impl DataSource {
    pub fn class_names(&self) -> Vec<String> {
        match self {
            DataSource::Synthetic(ds) => {
                let k: usize = BatchSource::<f32>::num_classes(ds);
                (0..k).map(|i| format!("class{i}")).collect()
            }
            DataSource::Speech(s) => s.class_names(),
        }
    }

    pub fn as_batch_source(&mut self) -> &mut dyn BatchSource<f32> {
        match self {
            DataSource::Synthetic(ds) => ds,
            DataSource::Speech(s) => s,
        }
    }
}
