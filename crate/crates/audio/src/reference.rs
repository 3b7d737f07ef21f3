//! Independent textbook MFCC pipeline used only as an oracle in tests.
//!
//! Follows the same documented conventions as `mfcc.rs` (centered frames,
//! periodic Hann, magnitude spectrum, HTK mel triangles, log floor,
//! orthonormal DCT-II) but shares no code with it: the spectrum comes from a
//! direct O(N^2) DFT and the mel/DCT stages are recomputed per call from
//! their defining formulas.

use crate::mfcc::{MfccConfig, FFT_SIZE, LOG_FLOOR};
use crate::wav::WavClip;

pub fn mfcc_reference(clip: &WavClip, cfg: &MfccConfig) -> Vec<f64> {
    assert_eq!(clip.sample_rate, cfg.sample_rate);
    assert_eq!(clip.samples.len(), cfg.sample_rate as usize);
    let win = cfg.window_len();
    let hop = cfg.hop_len();
    let frames = cfg.num_frames();
    let half = win / 2;
    let bins = FFT_SIZE / 2 + 1;
    let second = cfg.sample_rate as usize;

    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);

    let mut out = Vec::with_capacity(frames * cfg.n_mfcc);
    for t in 0..frames {
        // windowed frame, zero padded to the transform size
        let mut frame = vec![0.0f64; FFT_SIZE];
        let center = (t * hop) as isize;
        for i in 0..win {
            let src = center - half as isize + i as isize;
            if src >= 0 && (src as usize) < second {
                let w = 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / win as f64).cos());
                frame[i] = clip.samples[src as usize] as f64 * w;
            }
        }
        // direct DFT magnitude
        let mut mag = vec![0.0f64; bins];
        for (k, m) in mag.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &x) in frame.iter().enumerate() {
                let ang = -std::f64::consts::TAU * k as f64 * n as f64 / FFT_SIZE as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            *m = (re * re + im * im).sqrt();
        }
        // triangular mel filters, unit peak
        let lo = mel(cfg.fmin);
        let hi = mel(cfg.fmax);
        let edge = |i: usize| inv_mel(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64);
        let mut logmel = vec![0.0f64; cfg.n_mels];
        for (j, lm) in logmel.iter_mut().enumerate() {
            let (fl, fc, fr) = (edge(j), edge(j + 1), edge(j + 2));
            let mut acc = 0.0;
            for (k, &m) in mag.iter().enumerate() {
                let f = k as f64 * cfg.sample_rate as f64 / FFT_SIZE as f64;
                if f >= fl && f <= fc {
                    acc += m * (f - fl) / (fc - fl);
                } else if f > fc && f <= fr {
                    acc += m * (fr - f) / (fr - fc);
                }
            }
            *lm = acc.max(LOG_FLOOR).ln();
        }
        // orthonormal DCT-II
        for k in 0..cfg.n_mfcc {
            let scale = if k == 0 {
                (1.0 / cfg.n_mels as f64).sqrt()
            } else {
                (2.0 / cfg.n_mels as f64).sqrt()
            };
            let mut c = 0.0;
            for (n, &v) in logmel.iter().enumerate() {
                c += v * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64
                    / (2.0 * cfg.n_mels as f64))
                    .cos();
            }
            out.push(scale * c);
        }
    }
    out
}
