//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{AudioError, Result};

/// One decoded clip: samples normalised to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct WavClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl WavClip {
    /// Right-pad with silence or truncate to exactly `len` samples.
    pub fn fixed_length(&self, len: usize) -> WavClip {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        WavClip { samples, sample_rate: self.sample_rate }
    }

    /// Exactly one second at the clip's rate.
    pub fn one_second(&self) -> WavClip {
        self.fixed_length(self.sample_rate as usize)
    }

    pub fn duration_samples(&self) -> usize {
        self.samples.len()
    }
}

fn format_err(path: &Path, defect: impl Into<String>) -> AudioError {
    AudioError::WavFormat { path: path.to_path_buf(), defect: defect.into() }
}

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Read a RIFF/WAVE file containing 16-bit PCM mono audio. Samples are
/// normalised by 32768, so -32768 maps to exactly -1.0.
pub fn load_wav(path: &Path) -> Result<WavClip> {
    let bytes = fs::read(path).map_err(|e| AudioError::io(path, e))?;
    if bytes.len() < 12 {
        return Err(format_err(path, "file shorter than the RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(format_err(path, "missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(format_err(path, "missing WAVE tag"));
    }

    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    let mut at = 12usize;
    while at + 8 <= bytes.len() {
        let chunk_id = &bytes[at..at + 4];
        let chunk_len = u32_at(&bytes, at + 4) as usize;
        let body_start = at + 8;
        if body_start + chunk_len > bytes.len() {
            return Err(format_err(
                path,
                format!(
                    "truncated {} chunk: declares {chunk_len} bytes, {} available",
                    String::from_utf8_lossy(chunk_id),
                    bytes.len() - body_start
                ),
            ));
        }
        let body = &bytes[body_start..body_start + chunk_len];
        match chunk_id {
            b"fmt " => {
                if chunk_len < 16 {
                    return Err(format_err(path, "fmt chunk shorter than 16 bytes"));
                }
                let audio_format = u16_at(body, 0);
                if audio_format != 1 {
                    return Err(format_err(path, format!("unsupported audio format {audio_format} (expected PCM)")));
                }
                let channels = u16_at(body, 2);
                if channels != 1 {
                    return Err(format_err(path, format!("expected mono, found {channels} channels")));
                }
                let bits = u16_at(body, 14);
                if bits != 16 {
                    return Err(format_err(path, format!("expected 16-bit samples, found {bits}")));
                }
                sample_rate = Some(u32_at(body, 4));
            }
            b"data" => data = Some(body),
            _ => {} // skip LIST, fact, etc.
        }
        // chunks are padded to even lengths
        at = body_start + chunk_len + (chunk_len & 1);
    }

    let sample_rate = sample_rate.ok_or_else(|| format_err(path, "missing fmt chunk"))?;
    let data = data.ok_or_else(|| format_err(path, "missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(format_err(path, "data chunk holds a half sample"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
        .collect();
    Ok(WavClip { samples, sample_rate })
}

/// Write 16-bit PCM mono; values are clamped to [-1, 1].
pub fn write_pcm16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| AudioError::io(path, e))?;
    f.write_all(&out).map_err(|e| AudioError::io(path, e))?;
    Ok(())
}
