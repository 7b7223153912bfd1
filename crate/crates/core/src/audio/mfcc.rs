use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{frame_count, FeatureMatrix, Waveform, HOP, WINDOW};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MfccConfig {
    pub n_mel: usize,
    pub n_coef: usize,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub pre_emphasis: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mel: 26,
            n_coef: 13,
            window: WINDOW,
            hop: HOP,
            n_fft: 512,
            pre_emphasis: 0.97,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale between 0 and Nyquist,
/// `n_mel x (n_fft/2 + 1)`.
fn mel_filterbank(n_mel: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mel + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mel + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mel)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// MFCCs per frame: per-frame pre-emphasis, Hann window, magnitude spectrum,
/// mel filterbank, log, orthonormal DCT-II, first `n_coef` coefficients.
pub fn mfcc(y: &Waveform, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    if cfg.hop == 0 || cfg.window < cfg.hop || cfg.n_coef > cfg.n_mel || cfg.n_fft < cfg.window {
        return Err(Error::invalid(format!("mfcc config {cfg:?}")));
    }
    let x = y.samples();
    let t = frame_count(x.len(), cfg.window, cfg.hop);
    if t == 0 {
        return Err(Error::TooShort {
            len: x.len(),
            window: cfg.window,
        });
    }
    let hann: Vec<f64> = (0..cfg.window)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (cfg.window - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg.n_mel, cfg.n_fft, y.sample_rate());
    let dct: Vec<Vec<f64>> = (0..cfg.n_coef)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / cfg.n_mel as f64).sqrt()
            } else {
                (2.0 / cfg.n_mel as f64).sqrt()
            };
            (0..cfg.n_mel)
                .map(|m| scale * (PI * k as f64 * (m as f64 + 0.5) / cfg.n_mel as f64).cos())
                .collect()
        })
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);

    let mut out = Vec::with_capacity(t * cfg.n_coef);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut logmel = vec![0.0; cfg.n_mel];
    for f in 0..t {
        let frame = &x[f * cfg.hop..f * cfg.hop + cfg.window];
        for c in buf.iter_mut() {
            *c = Complex::new(0.0, 0.0);
        }
        for i in 0..cfg.window {
            let prev = if i == 0 { frame[0] } else { frame[i - 1] };
            buf[i].re = (frame[i] - cfg.pre_emphasis * prev) * hann[i];
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..cfg.n_fft / 2 + 1].iter().map(|c| c.norm()).collect();
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&mag).map(|(w, v)| w * v).sum();
            logmel[m] = e.max(1e-10).ln();
        }
        for row in &dct {
            out.push(row.iter().zip(&logmel).map(|(a, b)| a * b).sum());
        }
    }
    Ok(FeatureMatrix {
        frames: Tensor::new(vec![t, cfg.n_coef], out)?,
        window: cfg.window,
        hop: cfg.hop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(xs: Vec<f64>) -> Waveform {
        Waveform::new(xs, 16_000).unwrap()
    }

    #[test]
    fn one_second_gives_49_frames_of_13() {
        let y = wave((0..16_000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect());
        let f = mfcc(&y, &MfccConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 49);
        assert_eq!(f.dim(), 13);
    }

    #[test]
    fn constant_input_gives_constant_frames() {
        let f = mfcc(&wave(vec![0.4; 8000]), &MfccConfig::default()).unwrap();
        for k in 0..f.dim() {
            let col: Vec<f64> = (0..f.num_frames()).map(|t| f.row(t)[k]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(var < 1e-10);
        }
    }

    #[test]
    fn deterministic_and_short_input_errors() {
        let y = wave((0..4000).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect());
        let a = mfcc(&y, &MfccConfig::default()).unwrap();
        let b = mfcc(&y, &MfccConfig::default()).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
        assert!(matches!(
            mfcc(&wave(vec![0.1; 399]), &MfccConfig::default()),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn distinct_tones_give_distinct_features() {
        let tone = |hz: f64| wave((0..4000).map(|i| (2.0 * PI * hz * i as f64 / 16_000.0).sin() * 0.5).collect());
        let a = mfcc(&tone(300.0), &MfccConfig::default()).unwrap();
        let b = mfcc(&tone(2000.0), &MfccConfig::default()).unwrap();
        let d: f64 = a.row(3).iter().zip(b.row(3)).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(d > 1.0);
    }
}
