//! MFCC feature extraction.
//!
//! Conventions (fixed for bit-stability and mirrored by the reference
//! pipeline in `reference.rs`):
//!
//! * centered framing: frame t covers [t*hop - win/2, t*hop + win/2), zero
//!   padded at the clip edges; one second at 16 kHz yields 101 frames
//! * periodic Hann window, w[i] = 0.5 (1 - cos(2 pi i / N))
//! * magnitude spectrum from a 512-point FFT (window zero-padded)
//! * 40 triangular mel filters between 20 Hz and 4 kHz, HTK mel scale
//!   mel(f) = 2595 log10(1 + f / 700), unit-peak triangles
//! * natural log with a 1e-10 floor
//! * orthonormal DCT-II, first 40 coefficients
//!
//! All arithmetic runs in f64.

use crate::error::{AudioError, Result};
use crate::wav::WavClip;

pub const NUM_FRAMES: usize = 101;
pub const NUM_COEFFS: usize = 40;
pub const FFT_SIZE: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16000,
            window_ms: 30,
            hop_ms: 10,
            n_mels: 40,
            n_mfcc: 40,
            fmin: 20.0,
            fmax: 4000.0,
        }
    }
}

impl MfccConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as usize * self.hop_ms as usize) / 1000
    }

    /// Centered framing over one second: 1 + sample_rate / hop.
    pub fn num_frames(&self) -> usize {
        1 + self.sample_rate as usize / self.hop_len()
    }
}

/// Time-major feature matrix, `frames x coefficients`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    coeffs: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, coeffs: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), frames * coeffs);
        FeatureMatrix { frames, coeffs, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coeffs(&self) -> usize {
        self.coeffs
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.coeffs..(t + 1) * self.coeffs]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Precomputed tables for repeated extraction.
pub struct MfccExtractor {
    cfg: MfccConfig,
    window: Vec<f64>,
    /// Per filter: (first bin, weights over consecutive bins).
    filters: Vec<(usize, Vec<f64>)>,
    /// n_mfcc x n_mels orthonormal DCT-II matrix, row-major.
    dct: Vec<f64>,
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Self {
        let n = cfg.window_len();
        let window: Vec<f64> =
            (0..n).map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos())).collect();

        let bins = FFT_SIZE / 2 + 1;
        let hz_per_bin = cfg.sample_rate as f64 / FFT_SIZE as f64;
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(cfg.n_mels);
        for j in 1..=cfg.n_mels {
            let (lo, mid, hi) = (edges[j - 1], edges[j], edges[j + 1]);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..bins {
                let f = k as f64 * hz_per_bin;
                let w = if f >= lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    if first.is_none() {
                        first = Some(k);
                    }
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }

        let mut dct = Vec::with_capacity(cfg.n_mfcc * cfg.n_mels);
        let m = cfg.n_mels as f64;
        for k in 0..cfg.n_mfcc {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            for n in 0..cfg.n_mels {
                let angle = std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / (2.0 * m);
                dct.push(scale * angle.cos());
            }
        }
        MfccExtractor { cfg, window, filters, dct }
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Extract the feature matrix of a one-second clip at the configured rate.
    pub fn extract(&self, clip: &WavClip) -> Result<FeatureMatrix> {
        let cfg = &self.cfg;
        if clip.sample_rate != cfg.sample_rate {
            return Err(AudioError::contract(
                "extract_mfcc",
                format!("clip is {} Hz, expected {} (no resampling)", clip.sample_rate, cfg.sample_rate),
            ));
        }
        let second = cfg.sample_rate as usize;
        if clip.samples.len() != second {
            return Err(AudioError::contract(
                "extract_mfcc",
                format!("clip has {} samples, expected exactly {second}", clip.samples.len()),
            ));
        }
        let win = cfg.window_len();
        let hop = cfg.hop_len();
        let frames = cfg.num_frames();
        let half = win / 2;
        let mut re = vec![0.0f64; FFT_SIZE];
        let mut im = vec![0.0f64; FFT_SIZE];
        let mut out = Vec::with_capacity(frames * cfg.n_mfcc);
        let mut mel_log = vec![0.0f64; cfg.n_mels];
        for t in 0..frames {
            re.iter_mut().for_each(|v| *v = 0.0);
            im.iter_mut().for_each(|v| *v = 0.0);
            let center = (t * hop) as isize;
            for i in 0..win {
                let src = center - half as isize + i as isize;
                if src >= 0 && (src as usize) < second {
                    re[i] = clip.samples[src as usize] as f64 * self.window[i];
                }
            }
            fft_in_place(&mut re, &mut im);
            for (j, (first, weights)) in self.filters.iter().enumerate() {
                let mut acc = 0.0;
                for (o, &w) in weights.iter().enumerate() {
                    let k = first + o;
                    let mag = (re[k] * re[k] + im[k] * im[k]).sqrt();
                    acc += w * mag;
                }
                mel_log[j] = acc.max(LOG_FLOOR).ln();
            }
            for k in 0..cfg.n_mfcc {
                let row = &self.dct[k * cfg.n_mels..(k + 1) * cfg.n_mels];
                let mut c = 0.0;
                for (r, &m) in row.iter().zip(&mel_log) {
                    c += r * m;
                }
                out.push(c);
            }
        }
        Ok(FeatureMatrix::new(frames, cfg.n_mfcc, out))
    }
}

/// One-shot extraction; builds the tables each call.
pub fn extract_mfcc(clip: &WavClip, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    MfccExtractor::new(*cfg).extract(clip)
}

/// Iterative radix-2 complex FFT, in place. Length must be a power of two.
pub(crate) fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // bit reversal permutation
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut m = n >> 1;
        while m >= 1 && j & m != 0 {
            j ^= m;
            m >>= 1;
        }
        j |= m;
    }
    // butterflies
    let mut len = 2;
    while len <= n {
        let ang = -std::f64::consts::TAU / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let mut cr = 1.0f64;
            let mut ci = 0.0f64;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_law() {
        let cfg = MfccConfig::default();
        assert_eq!(cfg.window_len(), 480);
        assert_eq!(cfg.hop_len(), 160);
        assert_eq!(cfg.num_frames(), 101);
        assert_eq!(cfg.num_frames(), NUM_FRAMES);
    }

    #[test]
    fn shape_contract_holds_for_any_clip() {
        let cfg = MfccConfig::default();
        let extractor = MfccExtractor::new(cfg);
        let clip = WavClip {
            samples: (0..16000).map(|i| ((i as f32) * 0.001).sin() * 0.3).collect(),
            sample_rate: 16000,
        };
        let m = extractor.extract(&clip).unwrap();
        assert_eq!(m.frames(), 101);
        assert_eq!(m.coeffs(), 40);
        assert!(m.all_finite());
    }

    #[test]
    fn silence_gives_identical_frames() {
        let cfg = MfccConfig::default();
        let clip = WavClip { samples: vec![0.0; 16000], sample_rate: 16000 };
        let m = extract_mfcc(&clip, &cfg).unwrap();
        let first = m.row(0).to_vec();
        for t in 1..m.frames() {
            assert_eq!(m.row(t), &first[..], "frame {t} differs");
        }
        // c0 of a constant floored log-mel vector, all other coefficients zero
        assert!((first[0] - (40.0f64).sqrt() * LOG_FLOOR.ln()).abs() < 1e-9);
        for &c in &first[1..] {
            assert!(c.abs() < 1e-9);
        }
    }

    #[test]
    fn extraction_is_pure() {
        let cfg = MfccConfig::default();
        let clip = WavClip {
            samples: (0..16000).map(|i| ((i % 97) as f32 / 97.0) - 0.5).collect(),
            sample_rate: 16000,
        };
        let a = extract_mfcc(&clip, &cfg).unwrap();
        let b = extract_mfcc(&clip, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn wrong_sample_rate_is_rejected() {
        let cfg = MfccConfig::default();
        let clip = WavClip { samples: vec![0.0; 8000], sample_rate: 8000 };
        let err = extract_mfcc(&clip, &cfg).unwrap_err();
        assert!(err.to_string().contains("8000"), "{err}");
    }

    #[test]
    fn wrong_duration_is_rejected() {
        let cfg = MfccConfig::default();
        let clip = WavClip { samples: vec![0.0; 12000], sample_rate: 16000 };
        let err = extract_mfcc(&clip, &cfg).unwrap_err();
        assert!(err.to_string().contains("12000"), "{err}");
    }

    #[test]
    fn fft_matches_analytic_single_tone() {
        // a pure cosine at bin 8 concentrates all energy there
        let n = 64;
        let mut re: Vec<f64> =
            (0..n).map(|i| (std::f64::consts::TAU * 8.0 * i as f64 / n as f64).cos()).collect();
        let mut im = vec![0.0; n];
        fft_in_place(&mut re, &mut im);
        for k in 0..n {
            let mag = (re[k] * re[k] + im[k] * im[k]).sqrt();
            if k == 8 || k == n - 8 {
                assert!((mag - n as f64 / 2.0).abs() < 1e-9, "bin {k}: {mag}");
            } else {
                assert!(mag < 1e-9, "bin {k}: {mag}");
            }
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [20.0, 440.0, 1000.0, 4000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }
}
