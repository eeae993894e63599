//! Dataset ingestion: byte-level text and a flat binary image format.
//!
//! Image files start with `"MMIM" | u32 H | u32 W | u32 C | u32 count`,
//! followed by `count` records of `u16 label | H·W·C bytes`, little-endian.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"MMIM";
const IMAGE_HEADER: usize = 20;

/// Byte-level tokens of a text file.
pub fn ingest_text(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Format(format!("{} is empty", path.display())));
    }
    Ok(bytes)
}

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: Vec<u16>,
    pub pixels: Vec<u8>,
}

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: vec![0.5; 3], std: vec![0.25; 3] }
    }
}

impl ImageDataset {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageDataset { height, width, channels, labels: Vec::new(), pixels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.image_size();
        &self.pixels[i * s..(i + 1) * s]
    }

    pub fn push(&mut self, label: u16, pixels: &[u8]) -> Result<()> {
        if pixels.len() != self.image_size() {
            return Err(Error::Dimension(format!("image of {} bytes, expected {}", pixels.len(), self.image_size())));
        }
        self.labels.push(label);
        self.pixels.extend_from_slice(pixels);
        Ok(())
    }

    /// Records `range` as a new dataset.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        let s = self.image_size();
        ImageDataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            labels: self.labels[range.clone()].to_vec(),
            pixels: self.pixels[range.start * s..range.end * s].to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_HEADER + self.len() * (2 + self.image_size()));
        out.extend_from_slice(IMAGE_MAGIC);
        for v in [self.height, self.width, self.channels, self.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < IMAGE_HEADER || &bytes[..4] != IMAGE_MAGIC {
            return Err(Error::Format("malformed image dataset header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, c, count) = (field(0), field(1), field(2), field(3));
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Format(format!("image dimensions {h}x{w}x{c} must be positive")));
        }
        let record = 2 + h * w * c;
        let payload = bytes.len() - IMAGE_HEADER;
        if count.checked_mul(record) != Some(payload) {
            return Err(Error::Format(format!(
                "header declares {count} records of {record} bytes, payload has {payload} bytes"
            )));
        }
        let mut ds = ImageDataset::new(h, w, c);
        ds.labels.reserve(count);
        ds.pixels.reserve(count * (record - 2));
        for rec in bytes[IMAGE_HEADER..].chunks_exact(record) {
            ds.labels.push(u16::from_le_bytes([rec[0], rec[1]]));
            ds.pixels.extend_from_slice(&rec[2..]);
        }
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::checkpoint::write_atomic(path, &self.encode())
    }

    /// Images `idx` as a normalized `[b, H, W, C]` tensor.
    pub fn tensor<S: Scalar>(&self, idx: &[usize], norm: &Normalization) -> Result<Tensor<S>> {
        let c = self.channels;
        if norm.mean.len() != c || norm.std.len() != c {
            return Err(Error::Config(format!("normalization has {} means for {c} channels", norm.mean.len())));
        }
        let mut data = Vec::with_capacity(idx.len() * self.image_size());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Index(format!("image {i} of {}", self.len())));
            }
            for (k, &px) in self.image(i).iter().enumerate() {
                let ch = k % c;
                data.push(S::from_f64_lossy((px as f64 / 255.0 - norm.mean[ch]) / norm.std[ch]));
            }
        }
        Tensor::new(vec![idx.len(), self.height, self.width, c], data)
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i] as usize).collect()
    }
}

pub fn ingest_images(path: &Path) -> Result<ImageDataset> {
    ImageDataset::decode(&std::fs::read(path)?)
}

/// A procedurally drawn labeled image set: each class is an oriented
/// colour grating with its own frequency, randomly shifted, tinted and
/// corrupted with pixel noise, over a random background blob.
pub fn synthetic_images(count: usize, size: usize, classes: usize, seed: u64) -> ImageDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = ImageDataset::new(size, size, 3);
    let tau = std::f64::consts::TAU;
    let mut buf = vec![0u8; size * size * 3];
    for i in 0..count {
        let label = i % classes;
        let angle = std::f64::consts::PI * label as f64 / classes as f64 + rng.random_range(-0.15..0.15);
        let freq = (2.0 + (label % 3) as f64) / size as f64 * rng.random_range(0.85..1.15);
        let phase = rng.random_range(0.0..tau);
        let hue = label as f64 / classes as f64 * tau + rng.random_range(-0.4..0.4);
        let colour = [hue.cos(), (hue + tau / 3.0).cos(), (hue + 2.0 * tau / 3.0).cos()];
        let (bx, by) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let radius = rng.random_range(0.2..0.5) * size as f64;
        let contrast = rng.random_range(0.5..1.0);
        let (ca, sa) = (angle.cos(), angle.sin());
        for y in 0..size {
            for x in 0..size {
                let t = (x as f64 * ca + y as f64 * sa) * freq * tau + phase;
                let g = t.sin() * contrast;
                let d2 = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)) / (radius * radius);
                let blob = 0.3 * (-d2).exp();
                for ch in 0..3 {
                    let noise: f64 = rng.random_range(-0.15..0.15);
                    let v = 0.5 + 0.3 * g * (0.5 + 0.5 * colour[ch]) + blob + noise;
                    buf[(y * size + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        ds.push(label as u16, &buf).expect("sized buffer");
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_is_byte_identity() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        std::fs::write(&p, "ab").unwrap();
        assert_eq!(ingest_text(&p).unwrap(), b"ab");
    }

    #[test]
    fn image_round_trip() {
        let ds = synthetic_images(23, 8, 5, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("imgs.bin");
        ds.write(&p).unwrap();
        assert_eq!(ingest_images(&p).unwrap(), ds);
        assert_eq!(ds.labels[..6], [0, 1, 2, 3, 4, 0]);
    }

    #[test]
    fn short_payload_is_a_format_error() {
        let ds = synthetic_images(10, 4, 2, 2);
        let bytes = ds.encode();
        let rec = 2 + 4 * 4 * 3;
        assert!(matches!(ImageDataset::decode(&bytes[..bytes.len() - rec]), Err(Error::Format(_))));
        assert!(matches!(ImageDataset::decode(&bytes[..10]), Err(Error::Format(_))));
        assert!(matches!(ImageDataset::decode(b"XXXXaaaaaaaaaaaaaaaaaaaa"), Err(Error::Format(_))));
    }

    #[test]
    fn normalization() {
        let mut ds = ImageDataset::new(1, 1, 3);
        ds.push(0, &[0, 255, 51]).unwrap();
        let norm = Normalization { mean: vec![0.0, 0.5, 0.2], std: vec![1.0, 0.5, 0.1] };
        let t = ds.tensor::<f64>(&[0], &norm).unwrap();
        let want = [0.0, 1.0, 0.0];
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ds.tensor::<f64>(&[1], &norm).is_err());
    }
}
