//! Training-time augmentation: background-noise mixing with 80% probability
//! followed by a uniform time shift in [-100, 100] ms, zero-padding the
//! vacated region. Output length is always exactly the input length.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::wav::{load_wav, WavClip};

pub const NOISE_PROBABILITY: f64 = 0.8;
pub const NOISE_LEVEL: f64 = 0.1;
pub const SHIFT_RANGE_MS: f64 = 100.0;

static WARNED_EMPTY_POOL: AtomicBool = AtomicBool::new(false);

/// Background noise recordings, loaded once per run.
pub struct NoisePool {
    clips: Vec<WavClip>,
}

impl NoisePool {
    pub fn new(clips: Vec<WavClip>) -> Self {
        NoisePool { clips }
    }

    pub fn empty() -> Self {
        NoisePool { clips: Vec::new() }
    }

    pub fn from_files(paths: &[std::path::PathBuf]) -> Result<Self> {
        let mut clips = Vec::with_capacity(paths.len());
        for p in paths {
            clips.push(load_wav(p)?);
        }
        Ok(NoisePool { clips })
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    /// Random crop of `len` samples from a random recording. Recordings
    /// shorter than `len` are zero-extended.
    pub fn crop(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        let clip = &self.clips[rng.random_range(0..self.clips.len())];
        let max_start = clip.samples.len().saturating_sub(len);
        let start = if max_start == 0 { 0 } else { rng.random_range(0..max_start) };
        let mut out = vec![0.0f32; len];
        let take = clip.samples.len().min(start + len) - start;
        out[..take].copy_from_slice(&clip.samples[start..start + take]);
        out
    }

    /// Deterministic crop for evaluation-split silence records.
    pub fn crop_at(&self, file_index: usize, offset: usize, len: usize) -> Vec<f32> {
        let clip = &self.clips[file_index % self.clips.len()];
        let max_start = clip.samples.len().saturating_sub(len);
        let start = if max_start == 0 { 0 } else { offset % max_start };
        let mut out = vec![0.0f32; len];
        let take = clip.samples.len().min(start + len) - start;
        out[..take].copy_from_slice(&clip.samples[start..start + take]);
        out
    }
}

/// Deterministic core: optionally mix a noise crop at the given level, then
/// shift by `shift_ms` (positive delays the signal), zero-padding the gap.
pub fn augment_core(clip: &WavClip, noise: Option<(&[f32], f32)>, shift_ms: f64) -> WavClip {
    let n = clip.samples.len();
    let mut samples = clip.samples.clone();
    if let Some((crop, level)) = noise {
        for (s, &v) in samples.iter_mut().zip(crop) {
            *s = (*s + level * v).clamp(-1.0, 1.0);
        }
    }
    let shift = (shift_ms * clip.sample_rate as f64 / 1000.0).round() as isize;
    if shift != 0 {
        let mut shifted = vec![0.0f32; n];
        if shift > 0 {
            let s = shift as usize;
            if s < n {
                shifted[s..].copy_from_slice(&samples[..n - s]);
            }
        } else {
            let s = (-shift) as usize;
            if s < n {
                shifted[..n - s].copy_from_slice(&samples[s..]);
            }
        }
        samples = shifted;
    }
    WavClip { samples, sample_rate: clip.sample_rate }
}

/// What a sampled augmentation actually did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentTrace {
    pub noise_applied: bool,
    pub shift_ms: f64,
}

/// Sampled augmentation with its trace. Draw order is fixed: noise coin,
/// then (recording, offset, level) when it fires, then the shift.
pub fn augment_traced(clip: &WavClip, pool: &NoisePool, rng: &mut ChaCha8Rng) -> (WavClip, AugmentTrace) {
    let coin: f64 = rng.random();
    let noise = if coin < NOISE_PROBABILITY {
        if pool.is_empty() {
            if !WARNED_EMPTY_POOL.swap(true, Ordering::Relaxed) {
                eprintln!("warning: empty noise pool, augmentation degrades to time shift only");
            }
            None
        } else {
            let crop = pool.crop(rng, clip.samples.len());
            let level = (NOISE_LEVEL * rng.random::<f64>()) as f32;
            Some((crop, level))
        }
    } else {
        None
    };
    let shift_ms: f64 = rng.random_range(-SHIFT_RANGE_MS..=SHIFT_RANGE_MS);
    let trace = AugmentTrace { noise_applied: noise.is_some(), shift_ms };
    (augment_core(clip, noise.as_ref().map(|(c, l)| (c.as_slice(), *l)), shift_ms), trace)
}

pub fn augment(clip: &WavClip, pool: &NoisePool, rng: &mut ChaCha8Rng) -> WavClip {
    augment_traced(clip, pool, rng).0
}
