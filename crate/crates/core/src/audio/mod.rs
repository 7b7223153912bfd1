//! Waveforms, framing geometry, energy and the MFCC front end.

mod mfcc;
mod wav;

pub use mfcc::{mfcc, MfccConfig};
pub use wav::{load_wav, save_wav, wav_bytes};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 320;

/// Mono PCM signal. Samples are nominally in [-1, 1]; sums of sources may
/// exceed that range and are clipped only when written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySegment);
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Mean square of the segment.
pub fn energy(segment: &[f64]) -> Result<f64> {
    if segment.is_empty() {
        return Err(Error::EmptySegment);
    }
    Ok(segment.iter().map(|v| v * v).sum::<f64>() / segment.len() as f64)
}

/// Number of complete analysis windows: `floor((n - window) / hop) + 1`, or 0.
pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> usize {
    if n_samples < window || hop == 0 {
        0
    } else {
        (n_samples - window) / hop + 1
    }
}

/// `T x D` frame-level features together with the framing used to make them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor,
    pub window: usize,
    pub hop: usize,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.shape().first().copied().unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.frames.shape().get(1).copied().unwrap_or(0)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    /// Feature dump: `u64 T`, `u64 D`, then `T*D` little-endian f64, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.frames.len() * 8);
        out.extend_from_slice(&(self.num_frames() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in self.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8], window: usize, hop: usize) -> Result<Self> {
        let bad = || Error::invalid("malformed feature dump");
        if buf.len() < 16 {
            return Err(bad());
        }
        let t = u64::from_le_bytes(buf[0..8].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        if buf.len() != 16 + t * d * 8 {
            return Err(bad());
        }
        let data = buf[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            frames: Tensor::new(vec![t, d], data)?,
            window,
            hop,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
