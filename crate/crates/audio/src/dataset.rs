//! Speech Commands dataset indexing and batch rendering.
//!
//! The 12-class task: ten keywords, an unknown class fed by every other word
//! directory, and a silence class synthesized from `_background_noise_`
//! crops. Splits are 40/40/20 by a stable hash of the speaker id, so no
//! speaker ever straddles a split boundary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, NoisePool};
use crate::error::{AudioError, Result};
use crate::mfcc::{FeatureMatrix, MfccConfig, MfccExtractor};
use crate::wav::{load_wav, WavClip};

pub const KEYWORDS: [&str; 10] =
    ["yes", "no", "up", "down", "left", "right", "on", "off", "go", "stop"];
pub const NOISE_DIR: &str = "_background_noise_";
pub const NUM_CLASSES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Yes,
    No,
    Up,
    Down,
    Left,
    Right,
    On,
    Off,
    Go,
    Stop,
    Unknown,
    Silence,
}

pub const ALL_LABELS: [Label; NUM_CLASSES] = [
    Label::Yes,
    Label::No,
    Label::Up,
    Label::Down,
    Label::Left,
    Label::Right,
    Label::On,
    Label::Off,
    Label::Go,
    Label::Stop,
    Label::Unknown,
    Label::Silence,
];

impl Label {
    pub fn index(self) -> usize {
        ALL_LABELS.iter().position(|&l| l == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Unknown => "unknown",
            Label::Silence => "silence",
            other => KEYWORDS[other.index()],
        }
    }

    pub fn from_keyword_dir(dir: &str) -> Option<Label> {
        KEYWORDS.iter().position(|&k| k == dir).map(|i| ALL_LABELS[i])
    }

    pub fn is_keyword(self) -> bool {
        self.index() < 10
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitId {
    Train,
    Val,
    Test,
}

/// Split selections used by consumers; `TrainVal` is the merged set for
/// final from-scratch training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DataSplit {
    Train,
    Val,
    TrainVal,
    Test,
}

impl DataSplit {
    pub fn contains(self, split: SplitId) -> bool {
        matches!(
            (self, split),
            (DataSplit::Train, SplitId::Train)
                | (DataSplit::Val, SplitId::Val)
                | (DataSplit::TrainVal, SplitId::Train)
                | (DataSplit::TrainVal, SplitId::Val)
                | (DataSplit::Test, SplitId::Test)
        )
    }
}

/// FNV-1a; fixed across platforms so split assignment never drifts.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable speaker-hash split: 40% train, 40% validation, 20% test.
pub fn assign_split(speaker: &str) -> SplitId {
    match fnv1a64(speaker.as_bytes()) % 100 {
        0..=39 => SplitId::Train,
        40..=79 => SplitId::Val,
        _ => SplitId::Test,
    }
}

#[derive(Clone, Debug)]
pub enum RecordKind {
    Speech,
    /// 1-second crop of a noise recording; `base_offset` fixes the crop for
    /// evaluation splits, training re-crops per epoch.
    Silence { noise_index: usize, base_offset: u64 },
}

#[derive(Clone, Debug)]
pub struct Record {
    pub path: PathBuf,
    pub label: Label,
    pub split: SplitId,
    pub speaker: String,
    pub kind: RecordKind,
}

#[derive(Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub noise_files: Vec<PathBuf>,
}

/// Speaker id: the canonical naming is `<speakerhash>_nohash_<n>.wav`;
/// anything else uses the whole stem.
fn speaker_of(file_name: &str) -> String {
    let stem = file_name.strip_suffix(".wav").unwrap_or(file_name);
    match stem.find("_nohash") {
        Some(at) => stem[..at].to_string(),
        None => stem.to_string(),
    }
}

fn sorted_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| AudioError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| AudioError::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("wav") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Index a Speech Commands v1 layout: per-word directories plus
/// `_background_noise_`. Every keyword directory must exist and be
/// non-empty; silence records are synthesized so the class is as large as
/// the mean keyword class.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(AudioError::Ingestion(format!(
            "missing dataset root {}: expected per-word directories plus `{NOISE_DIR}/`",
            root.display()
        )));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| AudioError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let noise_dir = root.join(NOISE_DIR);
    if !noise_dir.is_dir() {
        return Err(AudioError::Ingestion(format!(
            "missing `{NOISE_DIR}/` under {}: expected background noise recordings",
            root.display()
        )));
    }
    let noise_files = sorted_wavs(&noise_dir)?;
    if noise_files.is_empty() {
        return Err(AudioError::Ingestion(format!(
            "`{NOISE_DIR}/` is empty: expected at least one noise wav"
        )));
    }

    let mut records = Vec::new();
    let mut keyword_counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for dir in &dirs {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name == NOISE_DIR {
            continue;
        }
        let label = Label::from_keyword_dir(&name).unwrap_or(Label::Unknown);
        let wavs = sorted_wavs(dir)?;
        if let Some(kw) = KEYWORDS.iter().find(|&&k| k == name) {
            if wavs.is_empty() {
                return Err(AudioError::Ingestion(format!(
                    "keyword directory `{name}/` is empty: expected utterance wavs"
                )));
            }
            keyword_counts.insert(kw, wavs.len());
        }
        for path in wavs {
            let file = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let speaker = speaker_of(file);
            let split = assign_split(&speaker);
            records.push(Record { path, label, split, speaker, kind: RecordKind::Speech });
        }
    }
    for kw in KEYWORDS {
        if !keyword_counts.contains_key(kw) {
            return Err(AudioError::Ingestion(format!(
                "missing keyword directory `{kw}/` under {}",
                root.display()
            )));
        }
    }

    // silence class as large as the mean keyword class
    let mean_keyword =
        (keyword_counts.values().sum::<usize>() as f64 / KEYWORDS.len() as f64).round() as usize;
    for k in 0..mean_keyword {
        let speaker = format!("silence_{k:05}");
        let split = assign_split(&speaker);
        records.push(Record {
            path: noise_files[k % noise_files.len()].clone(),
            label: Label::Silence,
            split,
            speaker: speaker.clone(),
            kind: RecordKind::Silence {
                noise_index: k % noise_files.len(),
                base_offset: fnv1a64(speaker.as_bytes()),
            },
        });
    }

    Ok(DatasetIndex { root: root.to_path_buf(), records, noise_files })
}

impl DatasetIndex {
    pub fn label_counts(&self, split: Option<DataSplit>) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for r in &self.records {
            if split.map_or(true, |s| s.contains(r.split)) {
                counts[r.label.index()] += 1;
            }
        }
        counts
    }

    /// Record indices of one epoch: unknown optionally downsampled to the
    /// mean keyword count of the split, then shuffled, all under the epoch
    /// seed.
    pub fn epoch_plan(&self, split: DataSplit, epoch_seed: u64, class_balance: bool) -> Vec<usize> {
        let mut keyword_total = 0usize;
        let mut keyword_classes = [0usize; 10];
        let mut kept: Vec<usize> = Vec::new();
        let mut unknown: Vec<usize> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            if !split.contains(r.split) {
                continue;
            }
            if r.label == Label::Unknown {
                unknown.push(i);
            } else {
                if r.label.is_keyword() {
                    keyword_total += 1;
                    keyword_classes[r.label.index()] += 1;
                }
                kept.push(i);
            }
        }
        let _ = keyword_classes;
        if class_balance && !unknown.is_empty() {
            let target = ((keyword_total as f64 / 10.0).round() as usize).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed ^ fnv1a64(b"balance"));
            shuffle(&mut unknown, &mut rng);
            unknown.truncate(target);
        }
        kept.extend(unknown);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed ^ fnv1a64(b"order"));
        shuffle(&mut kept, &mut rng);
        kept
    }

    /// CSV manifest: `path,label,split,speaker`.
    pub fn export_manifest(&self) -> String {
        let mut out = String::from("path,label,split,speaker\n");
        for r in &self.records {
            let split = match r.split {
                SplitId::Train => "train",
                SplitId::Val => "val",
                SplitId::Test => "test",
            };
            out.push_str(&format!("{},{},{},{}\n", r.path.display(), r.label.name(), split, r.speaker));
        }
        out
    }
}

fn shuffle(items: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// One rendered minibatch: flat f32 features, `batch x 101 x 40`.
pub struct FeatureBatch {
    pub batch: usize,
    pub frames: usize,
    pub coeffs: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub epoch_seed: u64,
    /// Downsample the unknown class to the mean keyword class size.
    pub class_balance: bool,
    /// Apply noise/shift augmentation and per-epoch silence recropping
    /// (training passes only).
    pub augment: bool,
}

/// Everything needed to turn index records into feature batches.
pub struct SpeechPipeline {
    pub index: DatasetIndex,
    noise: NoisePool,
    extractor: MfccExtractor,
}

impl SpeechPipeline {
    pub fn open(root: &Path, cfg: MfccConfig) -> Result<Self> {
        let index = scan_dataset(root)?;
        let noise = NoisePool::from_files(&index.noise_files)?;
        Ok(SpeechPipeline { index, noise, extractor: MfccExtractor::new(cfg) })
    }

    pub fn noise_pool(&self) -> &NoisePool {
        &self.noise
    }

    pub fn extractor(&self) -> &MfccExtractor {
        &self.extractor
    }

    fn render_record(&self, record: &Record, rng: Option<&mut ChaCha8Rng>) -> Result<FeatureMatrix> {
        let second = self.extractor.config().sample_rate as usize;
        let mut rng = rng;
        let clip = match &record.kind {
            RecordKind::Speech => load_wav(&record.path)?.one_second(),
            RecordKind::Silence { noise_index, base_offset } => {
                let samples = match rng.as_deref_mut() {
                    Some(r) => self.noise.crop(r, second),
                    None => self.noise.crop_at(*noise_index, *base_offset as usize, second),
                };
                WavClip { samples, sample_rate: self.extractor.config().sample_rate }
            }
        };
        let clip = match rng {
            Some(r) => augment(&clip, &self.noise, r),
            None => clip,
        };
        self.extractor.extract(&clip)
    }

    /// Render a batch of records in order; `rng` drives silence recropping
    /// and augmentation when present.
    pub fn render_batch(
        &self,
        record_indices: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FeatureBatch> {
        let cfg = self.extractor.config();
        let (frames, coeffs) = (cfg.num_frames(), cfg.n_mfcc);
        let mut features = Vec::with_capacity(record_indices.len() * frames * coeffs);
        let mut labels = Vec::with_capacity(record_indices.len());
        for &rec_idx in record_indices {
            let record = &self.index.records[rec_idx];
            let matrix = self.render_record(record, rng.as_deref_mut())?;
            features.extend(matrix.data().iter().map(|&v| v as f32));
            labels.push(record.label.index());
        }
        Ok(FeatureBatch { batch: record_indices.len(), frames, coeffs, features, labels })
    }

    /// Iterate one epoch of batches; trailing records that do not fill a
    /// batch are dropped.
    pub fn batches(&self, split: DataSplit, opts: BatchOptions) -> EpochBatches<'_> {
        let plan = self.index.epoch_plan(split, opts.epoch_seed, opts.class_balance);
        let rng = opts
            .augment
            .then(|| ChaCha8Rng::seed_from_u64(opts.epoch_seed ^ fnv1a64(b"augment")));
        EpochBatches { pipeline: self, plan, cursor: 0, opts, rng }
    }

    pub fn batches_in(&self, split: DataSplit, opts: &BatchOptions) -> usize {
        self.index.epoch_plan(split, opts.epoch_seed, opts.class_balance).len() / opts.batch_size
    }
}

pub struct EpochBatches<'a> {
    pipeline: &'a SpeechPipeline,
    plan: Vec<usize>,
    cursor: usize,
    opts: BatchOptions,
    rng: Option<ChaCha8Rng>,
}

impl Iterator for EpochBatches<'_> {
    type Item = Result<FeatureBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let bs = self.opts.batch_size;
        if self.cursor + bs > self.plan.len() {
            return None;
        }
        let indices = &self.plan[self.cursor..self.cursor + bs];
        let batch = self.pipeline.render_batch(indices, self.rng.as_mut());
        self.cursor += bs;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_assignment_is_a_pure_function() {
        for speaker in ["0a2b8d85", "c50f55b8", "9aa21fa9", "silence_00003"] {
            assert_eq!(assign_split(speaker), assign_split(speaker));
        }
        // frozen values guard the hash against accidental change
        assert_eq!(fnv1a64(b"0a2b8d85") % 100, 61);
        assert_eq!(assign_split("0a2b8d85"), SplitId::Val);
    }

    #[test]
    fn split_fractions_are_near_40_40_20() {
        let mut counts = [0usize; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..4000 {
            let id: String = (0..8).map(|_| format!("{:x}", rng.random_range(0..16u32))).collect();
            match assign_split(&id) {
                SplitId::Train => counts[0] += 1,
                SplitId::Val => counts[1] += 1,
                SplitId::Test => counts[2] += 1,
            }
        }
        let frac = |c: usize| c as f64 / 4000.0;
        assert!((frac(counts[0]) - 0.4).abs() < 0.02, "train {}", frac(counts[0]));
        assert!((frac(counts[1]) - 0.4).abs() < 0.02, "val {}", frac(counts[1]));
        assert!((frac(counts[2]) - 0.2).abs() < 0.02, "test {}", frac(counts[2]));
    }

    #[test]
    fn same_speaker_never_straddles_splits() {
        let a = assign_split("f2e59f1b");
        for clip in 0..5 {
            let _ = clip;
            assert_eq!(assign_split("f2e59f1b"), a);
        }
    }

    #[test]
    fn label_names_round_trip() {
        for (i, label) in ALL_LABELS.iter().enumerate() {
            assert_eq!(label.index(), i);
        }
        assert_eq!(Label::from_keyword_dir("yes"), Some(Label::Yes));
        assert_eq!(Label::from_keyword_dir("bird"), None);
        assert_eq!(Label::Stop.name(), "stop");
        assert_eq!(Label::Unknown.name(), "unknown");
    }

    #[test]
    fn data_split_membership() {
        assert!(DataSplit::TrainVal.contains(SplitId::Train));
        assert!(DataSplit::TrainVal.contains(SplitId::Val));
        assert!(!DataSplit::TrainVal.contains(SplitId::Test));
        assert!(!DataSplit::Train.contains(SplitId::Val));
    }

    #[test]
    fn speaker_parsing_follows_canonical_naming() {
        assert_eq!(speaker_of("0a2b8d85_nohash_0.wav"), "0a2b8d85");
        assert_eq!(speaker_of("0a2b8d85_nohash_12.wav"), "0a2b8d85");
        assert_eq!(speaker_of("oddball.wav"), "oddball");
    }
}
