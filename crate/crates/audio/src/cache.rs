//! Optional on-disk feature cache: little-endian f32 records of one feature
//! matrix each, with a text index sidecar (`<file>.idx`) listing the record
//! ids in order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{AudioError, Result};
use crate::mfcc::FeatureMatrix;

const SIDECAR_HEADER: &str = "cellsearch-features v1";

fn sidecar_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

pub struct FeatureCacheWriter {
    bin: BufWriter<File>,
    bin_path: PathBuf,
    frames: usize,
    coeffs: usize,
    ids: Vec<String>,
}

impl FeatureCacheWriter {
    pub fn create(path: &Path, frames: usize, coeffs: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| AudioError::io(path, e))?;
        Ok(FeatureCacheWriter {
            bin: BufWriter::new(file),
            bin_path: path.to_path_buf(),
            frames,
            coeffs,
            ids: Vec::new(),
        })
    }

    pub fn append(&mut self, id: &str, matrix: &FeatureMatrix) -> Result<()> {
        if matrix.frames() != self.frames || matrix.coeffs() != self.coeffs {
            return Err(AudioError::Cache(format!(
                "record {id} is {}x{}, cache is {}x{}",
                matrix.frames(),
                matrix.coeffs(),
                self.frames,
                self.coeffs
            )));
        }
        if id.contains('\n') {
            return Err(AudioError::Cache(format!("record id {id:?} contains a newline")));
        }
        for &v in matrix.data() {
            self.bin
                .write_all(&(v as f32).to_le_bytes())
                .map_err(|e| AudioError::io(&self.bin_path, e))?;
        }
        self.ids.push(id.to_string());
        Ok(())
    }

    /// Flush the payload and write the index sidecar.
    pub fn finish(mut self) -> Result<()> {
        self.bin.flush().map_err(|e| AudioError::io(&self.bin_path, e))?;
        let mut out = format!(
            "{SIDECAR_HEADER} count={} dims={}x{}\n",
            self.ids.len(),
            self.frames,
            self.coeffs
        );
        for id in &self.ids {
            out.push_str(id);
            out.push('\n');
        }
        let sidecar = sidecar_path(&self.bin_path);
        std::fs::write(&sidecar, out).map_err(|e| AudioError::io(&sidecar, e))?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct FeatureCache {
    frames: usize,
    coeffs: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl FeatureCache {
    pub fn open(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let index =
            std::fs::read_to_string(&sidecar).map_err(|e| AudioError::io(&sidecar, e))?;
        let mut lines = index.lines();
        let header = lines.next().ok_or_else(|| AudioError::Cache("empty index sidecar".into()))?;
        let rest = header
            .strip_prefix(SIDECAR_HEADER)
            .ok_or_else(|| AudioError::Cache(format!("bad sidecar header: {header}")))?;
        let mut count = None;
        let mut dims = None;
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix("count=") {
                count = v.parse::<usize>().ok();
            } else if let Some(v) = field.strip_prefix("dims=") {
                let (f, c) = v
                    .split_once('x')
                    .ok_or_else(|| AudioError::Cache(format!("bad dims field: {v}")))?;
                dims = Some((
                    f.parse::<usize>().map_err(|_| AudioError::Cache(format!("bad dims: {v}")))?,
                    c.parse::<usize>().map_err(|_| AudioError::Cache(format!("bad dims: {v}")))?,
                ));
            }
        }
        let count = count.ok_or_else(|| AudioError::Cache("missing count in sidecar".into()))?;
        let (frames, coeffs) = dims.ok_or_else(|| AudioError::Cache("missing dims in sidecar".into()))?;
        let ids: Vec<String> = lines.map(str::to_string).collect();
        if ids.len() != count {
            return Err(AudioError::Cache(format!("sidecar lists {} ids, header says {count}", ids.len())));
        }

        let mut file = File::open(path).map_err(|e| AudioError::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| AudioError::io(path, e))?;
        let expected = count * frames * coeffs * 4;
        if bytes.len() != expected {
            return Err(AudioError::Cache(format!(
                "payload is {} bytes, expected {expected} for {count} records of {frames}x{coeffs}",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(FeatureCache { frames, coeffs, data, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn get(&self, i: usize) -> FeatureMatrix {
        let stride = self.frames * self.coeffs;
        let slice = &self.data[i * stride..(i + 1) * stride];
        FeatureMatrix::new(self.frames, self.coeffs, slice.iter().map(|&v| v as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_matrix(seed: f64) -> FeatureMatrix {
        let data = (0..101 * 40).map(|i| (i as f64 * 0.01 + seed).sin()).collect();
        FeatureMatrix::new(101, 40, data)
    }

    #[test]
    fn cache_round_trips_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let mut writer = FeatureCacheWriter::create(&path, 101, 40).unwrap();
        let a = toy_matrix(0.0);
        let b = toy_matrix(1.0);
        writer.append("clip_a", &a).unwrap();
        writer.append("clip_b", &b).unwrap();
        writer.finish().unwrap();

        let cache = FeatureCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.id(0), "clip_a");
        assert_eq!(cache.id(1), "clip_b");
        for (orig, got) in a.data().iter().zip(cache.get(0).data()) {
            assert_eq!(*orig as f32, *got as f32);
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let mut writer = FeatureCacheWriter::create(&path, 101, 40).unwrap();
        writer.append("clip", &toy_matrix(2.0)).unwrap();
        writer.finish().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let err = FeatureCache::open(&path).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let mut writer = FeatureCacheWriter::create(&path, 50, 40).unwrap();
        let err = writer.append("clip", &toy_matrix(0.0)).unwrap_err();
        assert!(err.to_string().contains("101x40"), "{err}");
    }
}
