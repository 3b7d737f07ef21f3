//! Audio frontend for the cell-search engine: WAV ingestion, noise and
//! time-shift augmentation, MFCC feature extraction and Speech Commands
//! dataset indexing with deterministic speaker-hash splits.

pub mod augment;
pub mod cache;
pub mod dataset;
pub mod error;
pub mod mfcc;
pub mod reference;
pub mod wav;

pub use error::{AudioError, Result};
pub use mfcc::{FeatureMatrix, MfccConfig, MfccExtractor, NUM_COEFFS, NUM_FRAMES};
pub use wav::WavClip;
